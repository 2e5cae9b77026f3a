"""U-shaped convolutional decoder over the encoder's multi-scale features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffops as D
from .diffops import ParamStore, Tensor
from .diffops.params import he_normal
from .errors import ShapeError


@dataclass(frozen=True)
class DecoderConfig:
    n_classes: int = 2
    base_width: int = 48
    in_channels: int = 1
    n_levels: int = 5
    eps: float = 1e-5
    slope: float = 0.01

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")

    @property
    def widths(self) -> list[int]:
        """Decoder widths at scales 0..n_levels: ``[C, C, 2C, 4C, ...]``."""
        C = self.base_width
        return [C] + [C * 2 ** i for i in range(self.n_levels)]

    @property
    def feature_channels(self) -> list[int]:
        C = self.base_width
        return [self.in_channels] + [C * 2 ** i for i in range(self.n_levels)]


def residual_block(x: Tensor, p, eps: float = 1e-5, slope: float = 0.01) -> Tensor:
    """``act(norm(conv(act(norm(conv(x)))))) + skip(x)`` with 3x3x3 convs.

    ``skip`` is the identity unless the view holds ``skip.w`` (a 1x1x1 conv
    used when the channel count changes).
    """
    h = D.conv3d(x, p["conv1.w"], p["conv1.b"], 1, 1)
    h = D.leaky_relu(D.instance_norm(h, p["norm1.g"], p["norm1.b"], eps), slope)
    h = D.conv3d(h, p["conv2.w"], p["conv2.b"], 1, 1)
    h = D.leaky_relu(D.instance_norm(h, p["norm2.g"], p["norm2.b"], eps), slope)
    skip = D.conv3d(x, p["skip.w"], p["skip.b"], 1, 0) if "skip.w" in p else x
    return h + skip


def upsample_concat(x: Tensor, skip: Tensor, p, eps: float = 1e-5, slope: float = 0.01) -> Tensor:
    """Deconvolve ``x`` by 2, concatenate ``[up, skip]`` on channels, run a residual block.

    ``skip`` must be twice the extents of ``x``; one voxel less per axis is
    accepted when the encoder zero-padded an odd grid, and the upsampled map
    is cropped to match.
    """
    x, skip = D.as_tensor(x), D.as_tensor(skip)
    up = D.conv3d_transpose(x, p["up.w"], p["up.b"], 2)
    target = skip.shape[1:]
    for n_up, n_skip in zip(up.shape[1:], target):
        if n_skip not in (n_up, n_up - 1):
            raise ShapeError(f"skip extents {target} incompatible with upsampled {up.shape[1:]}")
    if up.shape[1:] != target:
        up = up[:, :target[0], :target[1], :target[2]]
    return residual_block(D.concat([up, skip], axis=0), p.view("block"), eps, slope)


def decoder_forward(features, cfg: DecoderConfig, p) -> Tensor:
    """Logits ``[n_classes, H, W, D]`` from encoder features ``[f0, ..., f5]``."""
    if len(features) != cfg.n_levels + 1:
        raise ShapeError(f"expected {cfg.n_levels + 1} feature maps, got {len(features)}")
    enc = [residual_block(f, p.view(f"enc{i}"), cfg.eps, cfg.slope) for i, f in enumerate(features)]
    d = enc[-1]
    for i in range(cfg.n_levels - 1, -1, -1):
        d = upsample_concat(d, enc[i], p.view(f"up{i}"), cfg.eps, cfg.slope)
    return D.conv3d(d, p["out.w"], p["out.b"], 1, 0)


def segmentation_probs(logits) -> Tensor:
    """Channel-axis softmax: per-voxel class probabilities."""
    return D.softmax(logits, axis=0)


def _add_block(store: ParamStore, q: str, c_in: int, c_out: int, rng) -> None:
    store.add(q + "conv1.w", he_normal(rng, (c_out, c_in, 3, 3, 3), c_in * 27))
    store.add(q + "conv1.b", np.zeros(c_out))
    store.add(q + "norm1.g", np.ones(c_out))
    store.add(q + "norm1.b", np.zeros(c_out))
    store.add(q + "conv2.w", he_normal(rng, (c_out, c_out, 3, 3, 3), c_out * 27))
    store.add(q + "conv2.b", np.zeros(c_out))
    store.add(q + "norm2.g", np.ones(c_out))
    store.add(q + "norm2.b", np.zeros(c_out))
    if c_in != c_out:
        store.add(q + "skip.w", he_normal(rng, (c_out, c_in, 1, 1, 1), c_in))
        store.add(q + "skip.b", np.zeros(c_out))


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator, store: ParamStore | None = None,
                 prefix: str = "dec") -> ParamStore:
    """He-normal conv kernels, zero biases, unit instance-norm gains."""
    store = ParamStore() if store is None else store
    pre = prefix + "." if prefix else ""
    widths, feats = cfg.widths, cfg.feature_channels
    for i, (c_in, c_out) in enumerate(zip(feats, widths)):
        _add_block(store, f"{pre}enc{i}.", c_in, c_out, rng)
    for i in range(cfg.n_levels):
        q = f"{pre}up{i}."
        store.add(q + "up.w", he_normal(rng, (widths[i + 1], widths[i], 2, 2, 2), widths[i + 1]))
        store.add(q + "up.b", np.zeros(widths[i]))
        _add_block(store, q + "block.", 2 * widths[i], widths[i], rng)
    store.add(pre + "out.w", he_normal(rng, (cfg.n_classes, widths[0], 1, 1, 1), widths[0]))
    store.add(pre + "out.b", np.zeros(cfg.n_classes))
    return store
