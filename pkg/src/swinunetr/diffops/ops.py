"""Differentiable primitives (everything except convolutions).

Every function accepts :class:`Tensor` or array-like operands, computes in
the operands' float dtype and records a backward closure when a tape is
active.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import DegenerateInputError, ShapeError
from .tensor import Tensor, as_tensor, make_node

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_node(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """|x| with gradient sign(x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ----------------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_node(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_node(out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(ts), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def pad(x, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    x = as_tensor(x)
    widths = tuple(tuple(w) for w in widths)
    if not any(lo or hi for lo, hi in widths):
        return x
    out = np.pad(x.data, widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return make_node(out, (x,), lambda g: (np.ascontiguousarray(g[crop]),))


def roll(x, shift, axis) -> Tensor:
    """Toroidal roll (``np.roll`` semantics)."""
    x = as_tensor(x)
    shift = tuple(np.atleast_1d(shift).tolist())
    axis = tuple(np.atleast_1d(axis).tolist())
    if not any(s % x.shape[a] for s, a in zip(shift, axis)):
        return x
    back = tuple(-s for s in shift)
    return make_node(np.roll(x.data, shift, axis), (x,),
                     lambda g: (np.roll(g, back, axis),))


def take(x, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather ``x[index]`` along ``axis`` with integer ``index``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        g_moved = np.moveaxis(g, list(range(axis, axis + index.ndim)),
                              list(range(index.ndim)))
        gx_moved = np.moveaxis(gx, axis, 0)
        np.add.at(gx_moved, index, g_moved)
        return (gx,)

    return make_node(out, (x,), backward)


# ----------------------------------------------------------------------------
# reductions and products
# ----------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = np.atleast_1d(axis).tolist()
    return tuple(a % ndim for a in axes)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the trailing feature axis.

    Args:
        x: Tensor[..., F_in].
        w: Tensor[F_in, F_out].
        b: optional Tensor[F_out].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data
        inputs.append(b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out.reshape(lead + (w.shape[1],)), inputs, backward)


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------

def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return make_node(out, (x,), backward)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))
    return make_node(out, (x,), lambda g: (np.where(pos, g, g * x.dtype.type(slope)),))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; each slice along ``axis`` sums to 1."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward)


# ----------------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------------

def _normalize(x: np.ndarray, axes: tuple, eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    return xc * inv, inv


def _normalize_backward(gxhat, xhat, inv, axes):
    n = int(np.prod([xhat.shape[a] for a in axes]))
    s1 = gxhat.sum(axis=axes, keepdims=True)
    s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
    return inv * (gxhat - s1 / n - xhat * (s2 / n))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing feature axis, then apply ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    f = x.shape[-1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError(f"layer_norm: affine params must have shape ({f},)")
    xhat, inv = _normalize(x.data, (x.ndim - 1,), eps)
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        gx = _normalize_backward(g * gamma.data, xhat, inv, (x.ndim - 1,)) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, gamma, beta), backward)


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes of a ``[C, ...]`` tensor."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine params must have shape ({c},)")
    axes = tuple(range(1, x.ndim))
    bshape = (c,) + (1,) * (x.ndim - 1)
    xhat, inv = _normalize(x.data, axes, eps)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = _normalize_backward(g * gamma.data.reshape(bshape), xhat, inv, axes)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_node(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------------------
# pooling / normalization of vectors
# ----------------------------------------------------------------------------

def global_avg_pool(x) -> Tensor:
    """Average every spatial position of a ``[C, ...]`` tensor -> ``[C]``."""
    x = as_tensor(x)
    return mean(x, axis=tuple(range(1, x.ndim)))


def l2_normalize(x, axis: int = -1) -> Tensor:
    """``x / ||x||_2`` along ``axis``; zero-norm slices are rejected."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("l2_normalize: zero-norm vector")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_node(out, (x,), backward)
