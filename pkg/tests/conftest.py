import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from conformer import Conformer, load_config

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_config():
    return load_config("micro")


@pytest.fixture(scope="session")
def micro_model(micro_config):
    return Conformer.create(micro_config, 0)
