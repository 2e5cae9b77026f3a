"""Tensor container and the operation tape used for reverse-mode gradients.

A :class:`Tape` records every primitive executed while it is active and whose
inputs require gradients. ``tape.backward(loss)`` replays the records in
reverse and accumulates ``.grad`` on leaf tensors (parameters and inputs
created with ``requires_grad=True``). Outside an active tape, operations only
compute values, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-d array with an optional gradient slot.

    Args:
        data: array-like; float inputs keep their dtype, everything else is
            converted to float32.
        requires_grad: mark as a leaf whose gradient should be accumulated.
        name: optional label (used in error messages and checkpoints).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_is_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._is_node = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from .ops import div
        return div(self, other)

    def __rtruediv__(self, other):
        from .ops import div
        return div(other, self)

    def __neg__(self):
        from .ops import neg
        return neg(self)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)

    def __getitem__(self, index):
        from .ops import getitem
        return getitem(self, index)

    def reshape(self, *shape):
        from .ops import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        from .ops import transpose
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from .ops import sum as _sum
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from .ops import mean
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as a constant tensor (no-op for tensors)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype or np.float32)
    return Tensor(arr)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed primitives for one training step.

    Usage::

        with Tape() as tape:
            loss = model_loss(params)
        tape.backward(loss)

    A tape is single-use: ``backward`` consumes and clears the records.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf reached."""
        if self.used:
            raise RuntimeError("tape already consumed by an earlier backward")
        self.used = True
        if not loss.requires_grad:
            self.records.clear()
            return
        if grad is None:
            if loss.size != 1:
                raise ValueError("backward without explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, loss.dtype)}
        if not loss._is_node:
            _accumulate_leaf(loss, pending.pop(id(loss)))
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gt in zip(rec.inputs, in_grads):
                if gt is None or not t.requires_grad:
                    continue
                if t._is_node:
                    prev = pending.get(id(t))
                    pending[id(t)] = gt if prev is None else prev + gt
                else:
                    _accumulate_leaf(t, gt)
        self.records.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def make_node(data: np.ndarray, inputs: Sequence[Tensor],
              backward: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Wrap an op result and record it on the active tape if needed.

    ``backward`` maps the output gradient to a sequence of input gradients
    (``None`` for inputs that need none), aligned with ``inputs``.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._is_node = True
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward))
    else:
        out.requires_grad = False
    return out


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
