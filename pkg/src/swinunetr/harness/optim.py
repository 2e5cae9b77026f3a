"""AdamW with decoupled weight decay and the warm-up cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..diffops import ParamStore
from ..errors import NumericError


def lr_schedule(step: int, warmup: int, total: int, base: float) -> float:
    """Linear ramp ``0 -> base`` over ``warmup`` steps, then half-cosine decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > total:
        raise ValueError("warmup longer than the schedule")
    if step < warmup:
        return base * step / warmup
    if total == warmup:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


@dataclass
class OptimState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ParamStore, state: OptimState, lr: float | None = None) -> None:
    """One in-place AdamW update from the ``.grad`` slots of ``params``.

    Decay is applied to the weights directly (``p *= 1 - lr*wd``) before the
    bias-corrected Adam step. Parameters without a gradient are left alone.
    """
    lr = state.lr if lr is None else lr
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            t.data *= t.dtype.type(1.0 - lr * state.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.data -= (lr * update).astype(t.dtype, copy=False)
