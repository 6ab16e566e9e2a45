"""Dense row-major tensors with reverse-mode differentiation.

Forward ops (see :mod:`slotseg.ops`) record their backward closures on a
global tape in execution order; :func:`backward` walks the tape once in
reverse and accumulates gradients into leaf tensors. Storage is dense and
contiguous, one dtype per process (f32 for training, f64 for gradient
checks), switched globally.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_check_finite = True


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> type:
    return _default_dtype


def dtype_name() -> str:
    return "f32" if _default_dtype is np.float32 else "f64"


@contextlib.contextmanager
def default_dtype(name: str):
    """Temporarily switch the global dtype (used by gradient-check tests)."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


def finite_checks_enabled() -> bool:
    return _check_finite


def _assert_finite(arr: np.ndarray, where: str) -> None:
    if _check_finite and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {where}")


class Tensor:
    """Dense ndarray plus autodiff bookkeeping.

    ``data`` is always a contiguous numpy array of the process dtype unless
    constructed with an explicit dtype. ``grad`` is filled by
    :func:`backward` for leaf tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype if dtype is not None else _default_dtype)
        _assert_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array. Callers must not mutate it."""
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    @staticmethod
    def zeros(shape, dtype=None) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype if dtype is not None else _default_dtype))

    # Operator sugar; heavy lifting lives in slotseg.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _wrap(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_wrap(other, self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, _wrap(other, self))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.data.dtype)


class TapeEntry:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; entry i only consumes earlier outputs."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.recording = True

    def record(self, op, inputs, out, backward_fn) -> None:
        self.entries.append(TapeEntry(op, inputs, out, backward_fn))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_tape = Tape()


def tape() -> Tape:
    return _tape


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference / oracle evaluation)."""
    saved = _tape.recording
    _tape.recording = False
    try:
        yield
    finally:
        _tape.recording = saved


def record_op(op: str, inputs: Iterable[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Finish an op: finiteness check, requires_grad propagation, tape entry."""
    _assert_finite(out_data, op)
    inputs = tuple(inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    needs = _tape.recording and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        _tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, params: Iterable["object"] | None = None) -> None:
    """Reverse sweep from a scalar loss; accumulates into leaf ``.grad``.

    Gradients sum over multiple uses of a tensor. The tape is cleared on
    exit. When ``params`` is given, parameters unreachable from the loss
    receive explicit zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    produced = {id(e.out) for e in _tape.entries}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    try:
        for entry in reversed(_tape.entries):
            g_out = grads.pop(id(entry.out), None)
            holders.pop(id(entry.out), None)
            if g_out is None:
                continue
            in_grads = entry.backward_fn(g_out)
            for t, g in zip(entry.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    holders[key] = t
        for key, g in grads.items():
            t = holders[key]
            if t.requires_grad and key not in produced:
                t.grad = g if t.grad is None else t.grad + g
    finally:
        _tape.clear()
    if params is not None:
        for p in params:
            t = p.tensor if hasattr(p, "tensor") else p
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
