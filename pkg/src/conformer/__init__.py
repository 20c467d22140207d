"""Dual-branch CNN/transformer image classifier on a small numpy autodiff engine."""

from .config import ConfigurationError, ConformerConfig, degenerate, load_config, save_config
from .model import Conformer, ForwardResult, build_model, forward, predict
from .params import ModelParams
from .tensor import ContractError, DimensionError, NonFiniteError, Tape, Tensor, precision

__all__ = [
    "ConfigurationError",
    "Conformer",
    "ConformerConfig",
    "ContractError",
    "DimensionError",
    "ForwardResult",
    "ModelParams",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "build_model",
    "degenerate",
    "forward",
    "load_config",
    "precision",
    "predict",
    "save_config",
]

__version__ = "0.1.0"
