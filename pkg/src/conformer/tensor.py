"""Dense tensors and a reverse-mode tape.

A :class:`Tensor` wraps a contiguous numpy array. Differentiable operations
executed while a :class:`Tape` is active are appended to it; ``tape.backward``
replays them in reverse to accumulate gradients.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "precision",
    "default_dtype",
    "check_finite",
    "name_scope",
    "tensor",
    "current_tape",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A call violated an operation's preconditions."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_state = {
    "dtype": np.dtype(np.float32),
    "check_finite": False,
    "scope": [],
    "branches": None,
    "tapes": [],
}


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(kind: str) -> Iterator[None]:
    """Switch the dtype used for newly created tensors ("f32" or "f64")."""
    dtypes = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
    if kind not in dtypes:
        raise ValueError(f"unknown precision {kind!r}")
    old = _state["dtype"]
    _state["dtype"] = dtypes[kind]
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` from the first op whose output is not finite."""
    old = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = old


@contextlib.contextmanager
def name_scope(name: str) -> Iterator[None]:
    _state["scope"].append(name)
    try:
        yield
    finally:
        _state["scope"].pop()


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect a fingerprint of every piecewise branch choice (ReLU masks, max-pool winners)."""
    old = _state["branches"]
    log: list = []
    _state["branches"] = log
    try:
        yield log
    finally:
        _state["branches"] = old


def branches_recording() -> bool:
    return _state["branches"] is not None


def note_branch(selection: np.ndarray) -> None:
    log = _state["branches"]
    if log is not None:
        log.append(zlib.crc32(np.ascontiguousarray(selection).tobytes()))


def _scope_name() -> str:
    return "/".join(_state["scope"]) or "<root>"


def current_tape() -> "Tape | None":
    tapes = _state["tapes"]
    return tapes[-1] if tapes else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; the implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Create a tensor in the current default precision."""
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=requires_grad, name=name)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op output and record it on the active tape when needed."""
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values in scope {_scope_name()} (shape {data.shape})")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, tuple(inputs), backward))
    return out


class Gradients:
    """Gradient map returned by :meth:`Tape.backward`.

    Indexing with a tensor that never reached the loss yields zeros of
    matching shape.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def named(self, params: "dict[str, Tensor]") -> dict[str, np.ndarray]:
        return {name: self[t] for name, t in params.items()}


class Tape:
    """Records differentiable ops executed inside ``with Tape():``."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _state["tapes"].append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state["tapes"].remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> Gradients:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = gi if gi.dtype == t.dtype else gi.astype(t.dtype)
                else:
                    grads[key] = prev + gi
        return Gradients(grads)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    return tape.backward(loss)
