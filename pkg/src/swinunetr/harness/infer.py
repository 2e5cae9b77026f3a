"""Sliding-window inference with uniform blending."""

from __future__ import annotations

import itertools

import numpy as np

from ..datapipe import Volume, as_array
from ..errors import ShapeError


def window_starts(n: int, r: int, overlap: float) -> list[int]:
    """Start offsets along one axis; the last window is shifted inward to end at ``n``."""
    if r > n:
        raise ShapeError(f"window {r} exceeds extent {n}")
    stride = max(1, int(r * (1.0 - overlap)))
    starts = list(range(0, n - r + 1, stride))
    if starts[-1] != n - r:
        starts.append(n - r)
    return starts


def _predictor(model):
    if hasattr(model, "probs"):
        return model.probs
    if callable(model):
        return model
    raise TypeError("model must be callable or expose .probs")


def sliding_window_infer(v, model, roi, overlap: float = 0.5, return_counts: bool = False):
    """Blend per-window class probabilities over a whole volume.

    Args:
        v: :class:`Volume` or ``[C, H, W, D]`` array.
        model: object with ``probs(x) -> [K, h, w, d]`` or such a callable.
        roi: window extents; axes where the volume is smaller are zero-padded
            symmetrically to ``roi`` and cropped back afterwards.
        overlap: fraction of each window shared with its neighbour, in [0, 1).
        return_counts: also return the per-voxel window coverage.

    Returns:
        Probability :class:`Volume` ``[K, H, W, D]`` (and the counts array).
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    data = as_array(v)
    spacing = getattr(v, "spacing", (1.0, 1.0, 1.0))
    if data.ndim != 4:
        raise ShapeError(f"expected [C, H, W, D], got {data.shape}")
    roi = tuple(int(r) for r in roi)
    extents = data.shape[1:]
    before = [max(0, r - n) // 2 for n, r in zip(extents, roi)]
    pads = [(b, max(0, r - n) - b) for b, n, r in zip(before, extents, roi)]
    if any(sum(p) for p in pads):
        data = np.pad(data, [(0, 0)] + pads)
    full = data.shape[1:]
    predict = _predictor(model)
    counts = np.zeros(full, dtype=np.float32)
    acc = None
    grids = [window_starts(n, r, overlap) for n, r in zip(full, roi)]
    for starts in itertools.product(*grids):
        sl = tuple(slice(s, s + r) for s, r in zip(starts, roi))
        probs = np.asarray(predict(data[(slice(None),) + sl]))
        if probs.shape[1:] != roi:
            raise ShapeError(f"model returned {probs.shape} for window {roi}")
        if acc is None:
            acc = np.zeros((probs.shape[0],) + full, dtype=np.float32)
        acc[(slice(None),) + sl] += probs
        counts[sl] += 1
    out = acc / counts
    crop = tuple(slice(b, b + n) for b, n in zip(before, extents))
    out = np.ascontiguousarray(out[(slice(None),) + crop])
    result = Volume(out, spacing)
    if return_counts:
        return result, counts[crop]
    return result


def predict_labels(v, model, roi, overlap: float = 0.5) -> np.ndarray:
    """Argmax class map ``[H, W, D]``."""
    return sliding_window_infer(v, model, roi, overlap).data.argmax(axis=0)
