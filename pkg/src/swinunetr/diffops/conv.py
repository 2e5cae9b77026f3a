"""Direct 3D convolution and transposed convolution (im2col + matmul).

Layout is channel-first without a batch axis: volumes are ``[C, H, W, D]``,
conv weights ``[C_out, C_in, k, k, k]`` and transposed-conv weights
``[C_in, C_out, k, k, k]`` so that ``conv3d_transpose(y, w)`` is the adjoint
of ``conv3d(x, w)`` for the same ``w``. Padding is zero padding.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_node


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, s: int, out: tuple) -> np.ndarray:
    """``[C, Hp, Wp, Dp]`` -> ``[C*k^3, Ho*Wo*Do]`` with rows ordered (c, i, j, l)."""
    c = xp.shape[0]
    ho, wo, do = out
    if k == s:
        v = xp[:, :ho * k, :wo * k, :do * k].reshape(c, ho, k, wo, k, do, k)
        return v.transpose(0, 2, 4, 6, 1, 3, 5).reshape(c * k ** 3, ho * wo * do)
    cols = np.empty((c, k, k, k, ho, wo, do), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, i, j, l] = xp[:, i:i + s * ho:s, j:j + s * wo:s, l:l + s * do:s]
    return cols.reshape(c * k ** 3, ho * wo * do)


def _col2im(cols: np.ndarray, c: int, padded: tuple, k: int, s: int, out: tuple) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into a ``[C, *padded]`` grid."""
    ho, wo, do = out
    if k == s:
        v = cols.reshape(c, k, k, k, ho, wo, do).transpose(0, 4, 1, 5, 2, 6, 3)
        v = v.reshape(c, ho * k, wo * k, do * k)
        if v.shape[1:] == tuple(padded):
            return np.ascontiguousarray(v)
        res = np.zeros((c,) + tuple(padded), dtype=cols.dtype)
        res[:, :ho * k, :wo * k, :do * k] = v
        return res
    res = np.zeros((c,) + tuple(padded), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, k, ho, wo, do)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                res[:, i:i + s * ho:s, j:j + s * wo:s, l:l + s * do:s] += cols[:, i, j, l]
    return res


def _check_kernel(w: Tensor) -> int:
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"expected cubic 5-d kernel, got {w.shape}")
    return w.shape[2]


def conv3d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """3D cross-correlation.

    Args:
        x: Tensor[C_in, H, W, D].
        w: Tensor[C_out, C_in, k, k, k]; ``k`` odd or equal to ``stride``.
        b: optional Tensor[C_out].
        stride: step between output samples.
        pad: zero padding added on every side.

    Returns:
        Tensor[C_out, H', W', D'] with ``H' = (H + 2*pad - k) // stride + 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    k = _check_kernel(w)
    if x.ndim != 4:
        raise ShapeError(f"conv3d expects [C, H, W, D], got {x.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[0]} channels, kernel expects {w.shape[1]}")
    if k % 2 == 0 and k != stride:
        raise ShapeError(f"conv3d: even kernel {k} requires stride == k")
    if stride < 1:
        raise ShapeError("conv3d: stride must be >= 1")
    if any(n + 2 * pad < k for n in x.shape[1:]):
        raise ShapeError(f"conv3d: extents {x.shape[1:]} + 2*{pad} smaller than kernel {k}")
    c_out, c_in = w.shape[:2]
    out = tuple(_out_extent(n, k, stride, pad) for n in x.shape[1:])
    xp = np.pad(x.data, ((0, 0),) + ((pad, pad),) * 3) if pad else x.data
    w2 = w.data.reshape(c_out, -1)
    y = w2 @ _im2col(xp, k, stride, out)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv3d: bias shape {b.shape} != ({c_out},)")
        y += b.data[:, None]
        inputs.append(b)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gx = gw = None
        if w.requires_grad:
            gw = (g2 @ _im2col(xp, k, stride, out).T).reshape(w.shape)
        if x.requires_grad:
            gxp = _col2im(w2.T @ g2, c_in, xp.shape[1:], k, stride, out)
            gx = gxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2], pad:pad + x.shape[3]] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return make_node(y.reshape((c_out,) + out), inputs, backward)


def conv3d_transpose(x, w, b=None, stride: int = 2) -> Tensor:
    """Transposed 3D convolution (no padding).

    Args:
        x: Tensor[C_in, H, W, D].
        w: Tensor[C_in, C_out, k, k, k].
        b: optional Tensor[C_out].
        stride: upsampling factor.

    Returns:
        Tensor[C_out, (H-1)*stride + k, ...]; extents multiply by ``stride``
        when ``k == stride``.
    """
    x, w = as_tensor(x), as_tensor(w)
    k = _check_kernel(w)
    if stride < 1:
        raise ShapeError("conv3d_transpose: stride must be >= 1")
    if x.ndim != 4:
        raise ShapeError(f"conv3d_transpose expects [C, H, W, D], got {x.shape}")
    if x.shape[0] != w.shape[0]:
        raise ShapeError(f"conv3d_transpose: input has {x.shape[0]} channels, kernel expects {w.shape[0]}")
    c_in, c_out = w.shape[:2]
    grid = x.shape[1:]
    out = tuple((n - 1) * stride + k for n in grid)
    a = w.data.reshape(c_in, -1)
    x2 = x.data.reshape(c_in, -1)
    y = _col2im(a.T @ x2, c_out, out, k, stride, grid)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv3d_transpose: bias shape {b.shape} != ({c_out},)")
        y += b.data[:, None, None, None]
        inputs.append(b)

    def backward(g):
        gcols = _im2col(g, k, stride, grid)
        gx = (a @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = (x2 @ gcols.T).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    return make_node(y, inputs, backward)
