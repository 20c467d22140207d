"""Raw ``TNSR`` tensor dumps: magic, u32 version, u8 rank, u64 dims, f32 payload (all little-endian)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1


class TensorFileError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    header = MAGIC + struct.pack("<IB", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise TensorFileError("not a TNSR file")
    version, rank = struct.unpack_from("<IB", blob, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported TNSR version {version}")
    off = 9
    if len(blob) < off + 8 * rank:
        raise TensorFileError("truncated TNSR header")
    dims = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(blob) != off + 4 * count:
        raise TensorFileError(f"TNSR payload size mismatch: expected {4 * count} bytes, found {len(blob) - off}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
