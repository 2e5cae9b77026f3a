"""Finite-difference gradient checking (64-bit)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tape, Tensor


def _scalar(y: Tensor) -> float:
    v = float(np.asarray(y.data).reshape(()))
    if not np.isfinite(v):
        raise NumericError("grad_check: objective is not finite")
    return v


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` against central differences.

    Every coordinate of ``x`` is perturbed, so keep ``x`` small.

    Returns:
        max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return grad_check_tensors(lambda ts: f(ts[0]), [Tensor(x64, requires_grad=True)], h=h)


def grad_check_tensors(f: Callable[[Sequence[Tensor]], Tensor], tensors: Sequence[Tensor],
                       h: float = 1e-5, max_coords: int | None = None,
                       rng: np.random.Generator | None = None) -> float:
    """Gradient check over several leaf tensors at once.

    ``tensors`` must be float64 leaves with ``requires_grad=True``; ``f``
    closes over or receives them and returns a scalar. With ``max_coords``
    only that many randomly chosen coordinates per tensor are perturbed,
    which keeps whole-model checks tractable.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("grad_check runs in float64; convert tensors first")
        t.grad = None
    with Tape() as tape:
        y = f(tensors)
    _scalar(y)
    tape.backward(y)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"grad_check: non-finite analytic gradient for {t.name or t.shape}")
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(tensors))
            flat[i] = orig - h
            fm = _scalar(f(tensors))
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
