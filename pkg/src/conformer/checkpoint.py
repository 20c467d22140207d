"""Binary checkpoints: little-endian, self-describing, all-or-nothing loading.

Layout::

    b"CFMR" | u32 version | u64 step | u32 n + n bytes config JSON | u32 count
    count x (u16 n + n bytes name | u8 rank | rank x u64 dims | f32 payload)
    32 bytes RNG state (PCG64 state, then increment; 128-bit little-endian each)

Tensor names are the parameter names, ``buffers/<name>`` for BatchNorm
statistics and ``adam.m/<name>``, ``adam.v/<name>`` for optimizer moments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConformerConfig
from .params import ModelParams
from .tensor import Tensor

MAGIC = b"CFMR"
VERSION = 1
RNG_BYTES = 32
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of this format version."""


@dataclass
class Checkpoint:
    config: ConformerConfig
    step: int
    params: ModelParams
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    rng_state: bytes = bytes(RNG_BYTES)
    version: int = VERSION


def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(k, t.data) for k, t in ckpt.params.items()]
    out += [(f"buffers/{k}", v) for k, v in ckpt.params.buffers.items()]
    out += [(f"adam.m/{k}", m) for k, (m, _) in ckpt.moments.items()]
    out += [(f"adam.v/{k}", v) for k, (_, v) in ckpt.moments.items()]
    return out


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.rng_state) != RNG_BYTES:
        raise CheckpointError(f"RNG state must be {RNG_BYTES} bytes")
    cfg = ckpt.config.to_json().encode("utf-8")
    tensors = _named_tensors(ckpt)
    parts = [MAGIC, struct.pack("<IQI", VERSION, ckpt.step, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(raw)}sB{arr.ndim}Q", len(raw), raw, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    parts.append(ckpt.rng_state)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    step, cfg_len = r.unpack("QI")
    try:
        config = ConformerConfig.from_json(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    (count,) = r.unpack("I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}Q") if rank else ()
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype=_F32).astype(np.float32).reshape(dims)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = arr
    rng_state = r.take(RNG_BYTES)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the RNG state")

    params, buffers, m, v = {}, {}, {}, {}
    for name, arr in tensors.items():
        head, sep, rest = name.partition("/")
        if sep and head == "buffers":
            buffers[rest] = arr
        elif sep and head == "adam.m":
            m[rest] = arr
        elif sep and head == "adam.v":
            v[rest] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True, name=name)
    if set(m) != set(v) or not set(m) <= set(params):
        raise CheckpointError("optimizer moments do not match the parameter set")
    moments = {k: (m[k], v[k]) for k in m}
    return Checkpoint(config, step, ModelParams(params, buffers), moments, rng_state, version)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically: the file appears complete or not at all."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
