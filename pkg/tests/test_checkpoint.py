import struct

import numpy as np
import pytest

from conformer.checkpoint import MAGIC, Checkpoint, CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from conformer.params import ModelParams
from conformer.tensor import Tensor


@pytest.fixture
def ckpt(micro_model):
    rng = np.random.default_rng(0)
    moments = {k: (rng.standard_normal(t.shape).astype(np.float32), rng.random(t.shape).astype(np.float32))
               for k, t in list(micro_model.params.items())[:5]}
    return Checkpoint(micro_model.config, 123, micro_model.params.copy(), moments, bytes(range(32)))


def test_round_trip_is_byte_identical(ckpt, tmp_path):
    a, b = tmp_path / "a.cfmr", tmp_path / "b.cfmr"
    save_checkpoint(a, ckpt)
    loaded = load_checkpoint(a)
    save_checkpoint(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.params.equal(ckpt.params)
    assert loaded.step == 123 and loaded.rng_state == bytes(range(32)) and loaded.config == ckpt.config
    for k, (m, v) in ckpt.moments.items():
        assert loaded.moments[k][0].tobytes() == m.tobytes() and loaded.moments[k][1].tobytes() == v.tobytes()
    assert not (tmp_path / "a.cfmr.tmp").exists()


def test_layout_matches_hand_written_encoder(micro_config):
    w = np.array([[1.5, -2.0, 0.25]], dtype=np.float32)
    b = np.array(3.0, dtype=np.float32)
    params = ModelParams({"w": Tensor(w), "b": Tensor(b)}, {"bn.running_mean": np.array([0.5], np.float32)})
    rng = bytes([7] * 32)
    cfg = micro_config.to_json().encode()

    expect = bytearray(b"CFMR")
    expect += (1).to_bytes(4, "little") + (9).to_bytes(8, "little") + len(cfg).to_bytes(4, "little") + cfg
    expect += (3).to_bytes(4, "little")
    for name, arr in (("w", w), ("b", b), ("buffers/bn.running_mean", np.array([0.5], np.float32))):
        expect += len(name).to_bytes(2, "little") + name.encode() + bytes([arr.ndim])
        for d in arr.shape:
            expect += d.to_bytes(8, "little")
        for x in arr.reshape(-1):
            expect += struct.pack("<f", float(x))
    expect += rng
    assert encode(Checkpoint(micro_config, 9, params, {}, rng)) == bytes(expect)


def test_big_endian_source_arrays_encode_identically(micro_config):
    vals = np.array([[1.0, -0.5], [3.25, 1e-3]], dtype=np.float32)
    native = Checkpoint(micro_config, 1, ModelParams({"x": Tensor(vals)}), {}, bytes(32))
    swapped = ModelParams({"x": Tensor(vals)})
    swapped["x"].data = vals.astype(">f4")
    other = Checkpoint(micro_config, 1, swapped, {}, bytes(32))
    assert encode(other) == encode(native)
    loaded = decode(encode(other))
    assert loaded.params["x"].data.dtype == np.float32
    np.testing.assert_array_equal(loaded.params["x"].data, vals)


def test_payload_is_little_endian_whatever_the_host(micro_config):
    vals = np.array([1.0], dtype=np.float32)
    blob = encode(Checkpoint(micro_config, 0, ModelParams({"x": Tensor(vals)}), {}, bytes(32)))
    assert blob[-32 - 4:-32] == struct.pack("<f", 1.0)
    # reading the same bytes as big-endian would give a different value, so byte order is fixed by the format
    assert np.frombuffer(blob[-36:-32], dtype=">f4")[0] != 1.0


@pytest.mark.parametrize("cut", [3, 10, 40, -33, -1])
def test_truncation_is_reported(ckpt, cut):
    blob = encode(ckpt)
    with pytest.raises(CheckpointError, match="truncated"):
        decode(blob[:cut])


def test_trailing_bytes_rejected(ckpt):
    with pytest.raises(CheckpointError, match="trailing"):
        decode(encode(ckpt) + b"\0")


def test_version_mismatch_refused(ckpt):
    blob = bytearray(encode(ckpt))
    blob[4:8] = (2).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="version 2"):
        decode(bytes(blob))


def test_bad_magic(ckpt):
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + encode(ckpt)[4:])
    assert encode(ckpt).startswith(MAGIC)


def test_moments_without_parameters_rejected(micro_config):
    params = ModelParams({"w": Tensor(np.ones(2, np.float32))})
    bad = Checkpoint(micro_config, 0, params, {"ghost": (np.ones(2, np.float32), np.ones(2, np.float32))},
                     bytes(32))
    with pytest.raises(CheckpointError, match="moments"):
        decode(encode(bad))


def test_rng_state_length_checked(ckpt):
    ckpt.rng_state = b"short"
    with pytest.raises(CheckpointError):
        encode(ckpt)


def test_failed_load_leaves_no_state(ckpt, tmp_path):
    path = tmp_path / "x.cfmr"
    path.write_bytes(encode(ckpt)[:-5])
    result = None
    with pytest.raises(CheckpointError):
        result = load_checkpoint(path)
    assert result is None
