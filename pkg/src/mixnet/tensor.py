"""Tensor type, engine precision mode and the recording tape.

Feature maps are rank-4 ``(N, C, H, W)`` arrays in row-major order. Weights
use the same :class:`Tensor` type with whatever rank their layer needs.
Gradients are computed by a :class:`Tape` that records every differentiable
operation executed while it is active and replays them in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ShapeError, UsageError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype: type = np.float32


def get_dtype() -> type:
    return _dtype


def set_precision(name: str) -> None:
    """Select the engine-wide scalar type (``"float32"`` or ``"float64"``)."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise UsageError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


@contextmanager
def precision(name: str) -> Iterator[None]:
    previous = np.dtype(_dtype).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """Dense array with value semantics and optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_is_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._is_op = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._is_op = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # Operator sugar; the implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.full(like.shape, value, dtype=like.dtype))


class Parameter(Tensor):
    """A named learnable tensor; its gradient buffer starts at zero."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around a forward pass, then call
    :meth:`backward` with the scalar loss. Leaf tensors (anything not produced
    by a recorded op, e.g. :class:`Parameter`) accumulate into ``.grad``.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss._is_op or not any(rec[0] is loss for rec in reversed(self.records)):
            raise UsageError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._is_op:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype)
                else:
                    parent.grad += pg


def make_result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op's output and record it when any parent is tracked."""
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._is_op = True
        tape.record(out, parents, backward)
    return out
