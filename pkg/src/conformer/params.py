"""Named parameter storage with scoped views."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ModelParams:
    """Trainable tensors plus non-trainable buffers (BatchNorm running stats), keyed by dotted name."""

    def __init__(self, tensors: dict[str, Tensor] | None = None, buffers: dict[str, np.ndarray] | None = None):
        self.tensors: dict[str, Tensor] = dict(tensors or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def subset(self, names) -> "ModelParams":
        names = set(names)
        return ModelParams({k: v for k, v in self.tensors.items() if k in names},
                           {k: v for k, v in self.buffers.items() if k.rsplit(".", 1)[0] + ".weight" in names})

    def equal(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of names, shapes, dtypes and values."""
        if list(self.tensors) != list(other.tensors) or list(self.buffers) != list(other.buffers):
            return False
        for k, v in self.tensors.items():
            o = other.tensors[k].data
            if v.data.dtype != o.dtype or v.data.shape != o.shape or v.data.tobytes() != o.tobytes():
                return False
        return all(v.tobytes() == other.buffers[k].tobytes() for k, v in self.buffers.items())


class Scope:
    """A prefixed view into a :class:`ModelParams`."""

    __slots__ = ("store", "prefix")

    def __init__(self, store: ModelParams, prefix: str):
        self.store = store
        self.prefix = prefix

    def _key(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def __getitem__(self, key: str) -> Tensor:
        return self.store.tensors[self._key(key)]

    def __contains__(self, key: str) -> bool:
        return self._key(key) in self.store.tensors

    def get(self, key: str) -> Tensor | None:
        return self.store.tensors.get(self._key(key))

    def buffer(self, key: str) -> np.ndarray:
        return self.store.buffers[self._key(key)]

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        self.store.buffers[self._key(key)] = value

    def sub(self, name: str) -> "Scope":
        return Scope(self.store, self._key(name))

    def __repr__(self) -> str:
        return f"Scope({self.prefix!r})"
