"""Segmentation metrics: Dice, HD95 and normalized surface distance (NSD).

Surfaces are foreground voxels with at least one 6-connected background
neighbour (out-of-bounds counts as background), placed in physical
coordinates ``index * spacing``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, ShapeError

_SIX = ndimage.generate_binary_structure(3, 1)


def _check(y, yhat):
    y, yhat = np.asarray(y, dtype=bool), np.asarray(yhat, dtype=bool)
    if y.shape != yhat.shape:
        raise ShapeError(f"mask extents differ: {y.shape} vs {yhat.shape}")
    return y, yhat


def dice(y, yhat) -> float:
    """``2|Y & Yhat| / (|Y| + |Yhat|)``; 1.0 when both masks are empty."""
    y, yhat = _check(y, yhat)
    total = int(y.sum()) + int(yhat.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(y, yhat).sum()) / total


def surface_voxels(m, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """``[n, 3]`` physical coordinates of the mask's surface voxels."""
    m = np.asarray(m, dtype=bool)
    if not m.any():
        raise DegenerateInputError("surface of an empty mask")
    interior = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    idx = np.argwhere(m & ~interior)
    return idx * np.asarray(spacing, dtype=np.float64)


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest point in ``b``."""
    return cKDTree(b).query(a, k=1)[0]


def surface_distances(y, yhat, spacing=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    y, yhat = _check(y, yhat)
    sy, sp = surface_voxels(y, spacing), surface_voxels(yhat, spacing)
    return _directed(sy, sp), _directed(sp, sy)


def hd95(y, yhat, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of both directed surface-distance sets pooled."""
    d_gt, d_pred = surface_distances(y, yhat, spacing)
    return float(np.percentile(np.concatenate([d_gt, d_pred]), 95))


def nsd(y, yhat, tol: float = 1.0, spacing=(1.0, 1.0, 1.0)) -> float:
    """Fraction of surface points (both masks) lying within ``tol`` mm of the other surface."""
    if tol < 0:
        raise ValueError("tolerance must be >= 0")
    d_gt, d_pred = surface_distances(y, yhat, spacing)
    hits = int((d_gt <= tol).sum()) + int((d_pred <= tol).sum())
    return hits / (d_gt.size + d_pred.size)


def evaluate_case(gt: np.ndarray, pred: np.ndarray, n_classes: int, spacing=(1.0, 1.0, 1.0),
                  tol: float = 1.0) -> list[tuple[int, str, float]]:
    """Per foreground class ``(class, metric, value)`` rows.

    Surface metrics are reported as NaN when either mask is empty.
    """
    rows = []
    for c in range(1, n_classes):
        y, yhat = gt == c, pred == c
        rows.append((c, "dice", dice(y, yhat)))
        if y.any() and yhat.any():
            rows.append((c, "hd95", hd95(y, yhat, spacing)))
            rows.append((c, "nsd", nsd(y, yhat, tol, spacing)))
        else:
            rows.append((c, "hd95", float("nan")))
            rows.append((c, "nsd", float("nan")))
    return rows


def format_report(rows) -> str:
    """Tab-separated ``case, class, metric, value`` lines, values at 6 decimals."""
    return "".join(f"{case}\t{cls}\t{metric}\t{value:.6f}\n" for case, cls, metric, value in rows)


def write_report(path, rows) -> None:
    Path(path).write_text(format_report(rows))


def read_report(path) -> list[tuple[str, int, str, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        case, cls, metric, value = line.split("\t")
        out.append((case, int(cls), metric, float(value)))
    return out
