"""Self-supervised proxy tasks: inpainting, rotation, contrastive coding.

Augmentation order per sample mirrors the pre-training loop: draw a z-axis
rotation for each of the two views, keep the rotated volumes as the
reconstruction targets, then apply cutout to each view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffops as D
from .datapipe import as_array
from .diffops import ParamStore, Tensor
from .diffops.params import he_normal, trunc_normal
from .errors import ShapeError
from .swin3d import EncoderConfig, encoder_forward

N_ROTATIONS = 4
EMBED_DIM = 512
_EXCLUDE = 1e9


@dataclass
class ViewPair:
    x1: np.ndarray
    x2: np.ndarray
    rot1: int
    rot2: int
    mask1: np.ndarray
    mask2: np.ndarray
    orig1: np.ndarray
    orig2: np.ndarray


def rotate_z90(x, k: int):
    """Rotate ``[C, H, W, D]`` by ``k * 90`` degrees in the (H, W) plane.

    Orientation: the voxel at ``(h=0, w=0)`` moves to ``(h=0, w=W-1)`` for ``k=1``.
    Accepts an array or a :class:`~swinunetr.datapipe.Volume`.
    """
    data = as_array(x)
    if data.shape[1] != data.shape[2]:
        raise ShapeError(f"rotation about z needs H == W, got {data.shape[1:3]}")
    out = np.ascontiguousarray(np.rot90(data, k % 4, axes=(2, 1)))
    if data is x:
        return out
    return type(x)(out, x.spacing)


def _cutout_side_bounds(n: int, lo: float, hi: float) -> tuple[int, int]:
    a = max(1, math.ceil(lo * n))
    b = max(a, math.floor(hi * n))
    return a, min(b, n)


def cutout(x, s: float, rng: np.random.Generator, fill="zero",
           side_range: tuple = (0.10, 0.25)) -> tuple[np.ndarray, np.ndarray]:
    """Erase random axis-aligned cuboids until at least ``ceil(s * H*W*D)`` voxels are covered.

    Args:
        x: ``[C, H, W, D]`` array.
        s: target erased fraction in (0, 1).
        rng: random generator.
        fill: ``"zero"`` or ``"noise"`` (uniform [0, 1) values).
        side_range: cuboid side as a fraction of each axis extent.

    Returns:
        ``(erased copy, boolean mask [H, W, D])``.
    """
    data = as_array(x)
    if not 0.0 < s < 1.0:
        raise ValueError("cutout ratio must lie in (0, 1)")
    extents = data.shape[1:]
    target = math.ceil(s * math.prod(extents) - 1e-9)
    bounds = [_cutout_side_bounds(n, *side_range) for n in extents]
    mask = np.zeros(extents, dtype=bool)
    covered = 0
    while covered < target:
        sl = []
        for n, (a, b) in zip(extents, bounds):
            side = int(rng.integers(a, b + 1))
            start = int(rng.integers(0, n - side + 1))
            sl.append(slice(start, start + side))
        region = mask[tuple(sl)]
        covered += region.size - int(region.sum())
        region[...] = True
    out = data.copy()
    if fill == "zero":
        out[:, mask] = 0
    elif fill == "noise":
        out[:, mask] = rng.random((data.shape[0], int(mask.sum()))).astype(data.dtype)
    else:
        raise ValueError(f"unknown cutout fill {fill!r}")
    return out, mask


def _seed_sequence(rng) -> np.random.SeedSequence:
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(2 ** 63)))
    return np.random.SeedSequence(rng)


def make_views(batch, rng, s: float | None = 0.3, rotate: bool = True, fill="zero") -> list[ViewPair]:
    """Two independent (rotation, cutout) augmentations per sample.

    Each view draws from its own stream spawned from ``rng`` so results do not
    depend on batch composition or processing order. ``s=None`` disables
    cutout and ``rotate=False`` disables rotation.
    """
    if len(batch) == 0:
        raise ValueError("make_views needs a nonempty batch")
    streams = _seed_sequence(rng).spawn(len(batch))
    pairs = []
    for x, seq in zip(batch, streams):
        x = as_array(x)
        g1, g2 = (np.random.default_rng(c) for c in seq.spawn(2))
        rot1 = int(g1.integers(N_ROTATIONS)) if rotate else 0
        rot2 = int(g2.integers(N_ROTATIONS)) if rotate else 0
        o1, o2 = rotate_z90(x, rot1), rotate_z90(x, rot2)
        if s:
            x1, m1 = cutout(o1, s, g1, fill)
            x2, m2 = cutout(o2, s, g2, fill)
        else:
            x1, x2 = o1.copy(), o2.copy()
            m1 = m2 = np.zeros(x.shape[1:], dtype=bool)
        pairs.append(ViewPair(x1, x2, rot1, rot2, m1, m2, o1, o2))
    return pairs


# ----------------------------------------------------------------------------
# heads
# ----------------------------------------------------------------------------

def init_ssl_heads(cfg: EncoderConfig, rng: np.random.Generator, store: ParamStore | None = None,
                   prefix: str = "ssl", embed_dim: int = EMBED_DIM) -> ParamStore:
    """Reconstruction (transposed conv), rotation (MLP) and contrastive (linear) heads."""
    store = ParamStore() if store is None else store
    pre = prefix + "." if prefix else ""
    F = cfg.feature_channels[-1]
    K = cfg.reduction
    store.add(pre + "rec.w", he_normal(rng, (F, cfg.in_channels, K, K, K), F))
    store.add(pre + "rec.b", np.zeros(cfg.in_channels))
    store.add(pre + "rot.w1", trunc_normal(rng, (F, F)))
    store.add(pre + "rot.b1", np.zeros(F))
    store.add(pre + "rot.w2", trunc_normal(rng, (F, N_ROTATIONS)))
    store.add(pre + "rot.b2", np.zeros(N_ROTATIONS))
    store.add(pre + "con.w", trunc_normal(rng, (F, embed_dim)))
    store.add(pre + "con.b", np.zeros(embed_dim))
    return store


def ssl_forward(features, p) -> tuple[Tensor, Tensor, Tensor]:
    """Heads on the bottleneck: ``(reconstruction, rotation logits [4], embedding)``.

    The reconstruction is a single transposed conv with kernel = stride =
    total encoder reduction, cropped to the input extents.
    """
    f5 = features[-1]
    K = p["rec.w"].shape[2]
    recon = D.conv3d_transpose(f5, p["rec.w"], p["rec.b"], K)
    target = features[0].shape[1:]
    if recon.shape[1:] != tuple(target):
        recon = recon[:, :target[0], :target[1], :target[2]]
    pooled = D.global_avg_pool(f5)
    rot = D.linear(D.gelu(D.linear(pooled, p["rot.w1"], p["rot.b1"])), p["rot.w2"], p["rot.b2"])
    embed = D.linear(pooled, p["con.w"], p["con.b"])
    return recon, rot, embed


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def inpaint_loss(recon, orig) -> Tensor:
    """Mean absolute error over all voxels."""
    recon, orig = D.as_tensor(recon), D.as_tensor(orig)
    if recon.shape != orig.shape:
        raise ShapeError(f"inpaint_loss: {recon.shape} vs {orig.shape}")
    return D.mean(D.abs(recon - orig))


def rotation_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of softmaxed rotation logits ``[B, 4]``."""
    logits = D.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    R = logits.shape[-1]
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeError(f"rotation_loss: logits {logits.shape} vs {labels.size} labels")
    if labels.min() < 0 or labels.max() >= R:
        raise ValueError(f"rotation labels must lie in [0, {R})")
    onehot = np.eye(R, dtype=logits.dtype)[labels]
    return -D.sum(D.log_softmax(logits, axis=1) * onehot) * (1.0 / labels.size)


def default_pairing(n_views: int) -> np.ndarray:
    """Partner index for views stacked as ``[first views; second views]``."""
    half = n_views // 2
    return (np.arange(n_views) + half) % n_views


def contrastive_loss(embeds, pairing=None, t: float = 0.5) -> Tensor:
    """Normalized-temperature cross-entropy averaged over all ``2N`` anchors.

    Similarities are dot products of L2-normalized rows; every ``k != i``
    enters the denominator of anchor ``i``.
    """
    embeds = D.as_tensor(embeds)
    if t <= 0:
        raise ValueError("temperature must be positive")
    n = embeds.shape[0]
    if embeds.ndim != 2 or n < 2:
        raise ShapeError("contrastive_loss needs a [2N, F] matrix with 2N >= 2")
    partner = default_pairing(n) if pairing is None else np.asarray(pairing, dtype=np.int64)
    if partner.shape != (n,) or np.any(partner == np.arange(n)):
        raise ValueError("pairing must map every anchor to a different view")
    v = D.l2_normalize(embeds, axis=1)
    sim = D.matmul(v, D.transpose(v, (1, 0))) * (1.0 / t)
    logits = sim + np.diag(np.full(n, -_EXCLUDE)).astype(embeds.dtype)
    onehot = np.zeros((n, n), dtype=embeds.dtype)
    onehot[np.arange(n), partner] = 1.0
    return -D.sum(D.log_softmax(logits, axis=1) * onehot) * (1.0 / n)


def total_loss(l_inpaint, l_contrast, l_rot, lam1: float = 1.0, lam2: float = 1.0, lam3: float = 1.0):
    """Weighted sum of the three proxy losses."""
    if min(lam1, lam2, lam3) < 0:
        raise ValueError("loss weights must be non-negative")
    return l_inpaint * lam1 + l_contrast * lam2 + l_rot * lam3


def pretrain_losses(views: list[ViewPair], cfg: EncoderConfig, enc_p, head_p,
                    t: float = 0.5, lambdas=(1.0, 1.0, 1.0)) -> dict[str, Tensor]:
    """Forward both views of every pair and evaluate the proxy losses.

    Views are stacked ``[x1 of every sample; x2 of every sample]`` so the
    contrastive partner of view ``i`` is ``i + N``.
    """
    inputs = [v.x1 for v in views] + [v.x2 for v in views]
    targets = [v.orig1 for v in views] + [v.orig2 for v in views]
    labels = [v.rot1 for v in views] + [v.rot2 for v in views]
    dtype = enc_p["embed.w"].dtype
    recon_terms, rots, embeds = [], [], []
    for x, target in zip(inputs, targets):
        feats = encoder_forward(np.asarray(x, dtype=dtype), cfg, enc_p)
        rec, rot, emb = ssl_forward(feats, head_p)
        recon_terms.append(inpaint_loss(rec, np.asarray(target, dtype=dtype)))
        rots.append(D.reshape(rot, (1, -1)))
        embeds.append(D.reshape(emb, (1, -1)))
    l_inp = D.stack(recon_terms).mean()
    l_rot = rotation_loss(D.concat(rots, 0), labels)
    l_con = contrastive_loss(D.concat(embeds, 0), t=t)
    return {
        "inpaint": l_inp,
        "contrast": l_con,
        "rot": l_rot,
        "total": total_loss(l_inp, l_con, l_rot, *lambdas),
    }
