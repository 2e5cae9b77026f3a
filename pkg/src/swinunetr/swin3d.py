"""Hierarchical 3D Swin Transformer encoder.

Token layout: a :class:`TokenGrid` with extents ``(h, w, d)`` stores its
tokens as rows of a ``[h*w*d, feat]`` tensor ordered with the ``d`` (z) index
slowest and the ``h`` (x) index fastest, i.e. ``values.reshape(d, w, h, feat)``
is the dense block. Every windowing helper below works on that block form.

Window masking follows the cyclic-shift scheme: the grid is rolled by
``-shift`` on every axis, partitioned into ``M^3`` windows, and token pairs whose
pre-shift region labels differ (3 intervals per axis, 27 regions) are masked
with ``-LARGE``. Grids that are not multiples of ``M`` are zero padded and the
padded tokens are masked out as keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffops as D
from .diffops import ParamStore, Tensor
from .diffops.params import trunc_normal
from .errors import ShapeError

LARGE = 1e4


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder hyperparameters (defaults are the published model's)."""

    patch: int = 2
    C: int = 48
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (3, 6, 12, 24)
    M: int = 4
    in_channels: int = 1
    rel_pos_bias: bool = False
    mlp_ratio: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(v) for v in self.depths))
        object.__setattr__(self, "heads", tuple(int(v) for v in self.heads))
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must have one entry per stage")
        if any(d < 2 or d % 2 for d in self.depths):
            raise ValueError(f"every stage depth must be even and >= 2, got {self.depths}")
        if self.M < 2:
            raise ValueError("window size M must be >= 2")
        if self.patch < 1 or self.C < 1 or self.in_channels < 1:
            raise ValueError("patch, C and in_channels must be positive")
        for width, h in zip(self.widths, self.heads):
            if h < 1 or width % h:
                raise ValueError(f"{h} heads do not divide stage width {width}")

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def widths(self) -> list[int]:
        return [self.C * 2 ** s for s in range(len(self.depths))]

    @property
    def feature_channels(self) -> list[int]:
        """Channels of ``[f0 .. f_{n+1}]`` returned by :func:`encoder_forward`."""
        return [self.in_channels] + self.widths + [self.C * 2 ** self.n_stages]

    @property
    def reduction(self) -> int:
        """Total downsampling from input voxels to the bottleneck."""
        return self.patch * 2 ** self.n_stages


@dataclass
class TokenGrid:
    grid: tuple  # (h, w, d)
    values: Tensor  # [h*w*d, feat]

    def __post_init__(self):
        h, w, d = self.grid
        if min(self.grid) < 1:
            raise ShapeError(f"grid extents must be >= 1, got {self.grid}")
        if self.values.ndim != 2 or self.values.shape[0] != h * w * d:
            raise ShapeError(f"values {self.values.shape} do not match grid {self.grid}")

    @property
    def feat(self) -> int:
        return self.values.shape[1]

    def block(self) -> Tensor:
        h, w, d = self.grid
        return D.reshape(self.values, (d, w, h, self.feat))

    @classmethod
    def from_block(cls, block: Tensor) -> "TokenGrid":
        d, w, h, f = block.shape
        return cls((h, w, d), D.reshape(block, (d * w * h, f)))

    def to_dense(self) -> Tensor:
        """``[feat, h, w, d]`` channel-first feature map."""
        return D.transpose(self.block(), (3, 2, 1, 0))

    @classmethod
    def from_dense(cls, x: Tensor) -> "TokenGrid":
        return cls.from_block(D.transpose(x, (3, 2, 1, 0)))


@dataclass(frozen=True)
class PadRecord:
    grid: tuple  # original (h, w, d)
    padded: tuple  # padded (h, w, d)


@dataclass(frozen=True)
class WindowMask:
    """Additive attention bias per window: ``bias[win, query, key]`` in {0, -LARGE}."""

    bias: np.ndarray


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    rel_table: Tensor | None = None

    @classmethod
    def from_view(cls, p) -> "AttentionParams":
        return cls(p["wq"], p["wk"], p["wv"], p["wo"], p.get("rel_table"))


# ----------------------------------------------------------------------------
# window geometry
# ----------------------------------------------------------------------------

def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def _pad_block(b: Tensor, multiple: int) -> Tensor:
    widths = [(0, _ceil_to(n, multiple) - n) for n in b.shape[:3]] + [(0, 0)]
    return D.pad(b, widths)


def _partition(b: Tensor, M: int) -> Tensor:
    a0, a1, a2, f = b.shape
    v = D.reshape(b, (a0 // M, M, a1 // M, M, a2 // M, M, f))
    v = D.transpose(v, (0, 2, 4, 1, 3, 5, 6))
    return D.reshape(v, (-1, M ** 3, f))


def _reverse(win: Tensor, M: int, dims: tuple) -> Tensor:
    a0, a1, a2 = dims
    f = win.shape[-1]
    v = D.reshape(win, (a0 // M, a1 // M, a2 // M, M, M, M, f))
    v = D.transpose(v, (0, 3, 1, 4, 2, 5, 6))
    return D.reshape(v, (a0, a1, a2, f))


def window_partition(t: TokenGrid, M: int) -> tuple[Tensor, PadRecord]:
    """Split a token grid into ``ceil(h/M)*ceil(w/M)*ceil(d/M)`` windows of ``M^3`` tokens.

    Windows are ordered z-slowest; tokens inside a window likewise.
    """
    if M < 1:
        raise ShapeError("window size must be >= 1")
    b = _pad_block(t.block(), M)
    d, w, h = b.shape[:3]
    return _partition(b, M), PadRecord(tuple(t.grid), (h, w, d))


def window_reverse(windows: Tensor, rec: PadRecord, M: int) -> TokenGrid:
    """Inverse of :func:`window_partition`; padding is discarded."""
    h, w, d = rec.padded
    if any(p % M or p < g for p, g in zip(rec.padded, rec.grid)):
        raise ShapeError(f"pad record {rec} inconsistent with window size {M}")
    n_win = (h // M) * (w // M) * (d // M)
    if windows.ndim != 3 or windows.shape[:2] != (n_win, M ** 3):
        raise ShapeError(f"windows {windows.shape} do not match pad record {rec}")
    b = _reverse(windows, M, (d, w, h))
    gh, gw, gd = rec.grid
    if (gh, gw, gd) != (h, w, d):
        b = b[:gd, :gw, :gh]
    return TokenGrid.from_block(b)


def cyclic_shift(t: TokenGrid, offset) -> TokenGrid:
    """Toroidal roll of token positions by ``offset = (dh, dw, dd)``."""
    oh, ow, od = (int(o) for o in offset)
    return TokenGrid.from_block(D.roll(t.block(), (od, ow, oh), (0, 1, 2)))


def _axis_labels(n: int, M: int, s: int) -> np.ndarray:
    lab = np.zeros(n, dtype=np.int64)
    if s:
        lab[n - M:n - s] = 1
        lab[n - s:] = 2
    return lab


def _window_ids(arr: np.ndarray, M: int) -> np.ndarray:
    a0, a1, a2 = arr.shape
    v = arr.reshape(a0 // M, M, a1 // M, M, a2 // M, M)
    return v.transpose(0, 2, 4, 1, 3, 5).reshape(-1, M ** 3)


def region_labels(grid, M: int, offset) -> np.ndarray:
    """Pre-shift region id (0..26) of every token, in post-shift windows ``[n_win, M^3]``."""
    h, w, d = (_ceil_to(n, M) for n in grid)
    oh, ow, od = offset
    lz, ly, lx = _axis_labels(d, M, od), _axis_labels(w, M, ow), _axis_labels(h, M, oh)
    labels = lz[:, None, None] * 9 + ly[None, :, None] * 3 + lx[None, None, :]
    return _window_ids(labels, M)


def build_shift_mask(grid, M: int, offset) -> WindowMask:
    """Mask separating tokens from different pre-shift regions inside each window."""
    if any(not 0 <= o < M for o in offset):
        raise ValueError(f"shift offset {offset} must lie in [0, {M})")
    ids = region_labels(grid, M, offset)
    bias = np.where(ids[:, :, None] != ids[:, None, :], -LARGE, 0.0)
    return WindowMask(bias)


@lru_cache(maxsize=64)
def _attention_bias(grid: tuple, M: int, shift: int, dtype: str) -> np.ndarray | None:
    """Combined region + padding bias for one (grid, M, shift) geometry; read-only."""
    padded = tuple(_ceil_to(n, M) for n in grid)
    bias = None
    if shift:
        bias = build_shift_mask(grid, M, (shift,) * 3).bias
    if padded != tuple(grid):
        h, w, d = grid
        valid = np.zeros(padded[::-1], dtype=bool)
        valid[:d, :w, :h] = True
        if shift:
            valid = np.roll(valid, (-shift,) * 3, (0, 1, 2))
        keymask = np.where(_window_ids(valid, M), 0.0, -LARGE)[:, None, :]
        bias = keymask if bias is None else bias + keymask
    if bias is not None:
        bias = np.ascontiguousarray(np.broadcast_to(bias, (bias.shape[0], M ** 3, M ** 3)), dtype=dtype)
        bias.setflags(write=False)
    return bias


@lru_cache(maxsize=16)
def relative_position_index(M: int) -> np.ndarray:
    """``[M^3, M^3]`` index into a ``(2M-1)^3`` relative-bias table."""
    c = np.stack(np.meshgrid(np.arange(M), np.arange(M), np.arange(M), indexing="ij")).reshape(3, -1)
    rel = c[:, :, None] - c[:, None, :] + (M - 1)
    idx = rel[0] * (2 * M - 1) ** 2 + rel[1] * (2 * M - 1) + rel[2]
    idx.setflags(write=False)
    return idx


# ----------------------------------------------------------------------------
# attention and blocks
# ----------------------------------------------------------------------------

def window_msa(windows: Tensor, p: AttentionParams, heads: int, mask=None,
               return_attn: bool = False):
    """Multi-head self-attention inside each window.

    ``softmax(Q K^T / sqrt(d) + mask) V`` per head with ``d = feat / heads``;
    heads are concatenated and projected by ``wo``.

    Args:
        windows: Tensor[n_win, T, feat].
        p: projection weights, each ``[feat, feat]``.
        heads: number of heads.
        mask: optional :class:`WindowMask` or array broadcastable to ``[n_win, T, T]``.
        return_attn: also return the attention weights ``[n_win, heads, T, T]``.
    """
    n_win, T, f = windows.shape
    for name in ("wq", "wk", "wv", "wo"):
        if getattr(p, name).shape != (f, f):
            raise ShapeError(f"{name} must be [{f}, {f}], got {getattr(p, name).shape}")
    if f % heads:
        raise ShapeError(f"{heads} heads do not divide width {f}")
    d = f // heads

    def split(w):
        return D.transpose(D.reshape(D.linear(windows, w), (n_win, T, heads, d)), (0, 2, 1, 3))

    q, k, v = split(p.wq), split(p.wk), split(p.wv)
    logits = D.matmul(q, D.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
    if p.rel_table is not None:
        M = round(T ** (1 / 3))
        idx = relative_position_index(M)
        rel = D.take(p.rel_table, idx.reshape(-1), axis=0)
        logits = logits + D.transpose(D.reshape(rel, (T, T, heads)), (2, 0, 1))
    if mask is not None:
        bias = mask.bias if isinstance(mask, WindowMask) else np.asarray(mask)
        if bias.ndim == 3:
            bias = bias[:, None]
        logits = logits + bias.astype(windows.dtype, copy=False)
    attn = D.softmax(logits, axis=-1)
    out = D.matmul(attn, v)
    out = D.reshape(D.transpose(out, (0, 2, 1, 3)), (n_win, T, f))
    out = D.linear(out, p.wo)
    return (out, attn) if return_attn else out


def _windowed_attention(t: TokenGrid, p: AttentionParams, M: int, heads: int, shift: int) -> Tensor:
    b = _pad_block(t.block(), M)
    dims = b.shape[:3]
    if shift:
        b = D.roll(b, (-shift,) * 3, (0, 1, 2))
    bias = _attention_bias(tuple(int(n) for n in t.grid), M, shift, b.dtype.name)
    out = window_msa(_partition(b, M), p, heads, bias)
    b = _reverse(out, M, dims)
    if shift:
        b = D.roll(b, (shift,) * 3, (0, 1, 2))
    h, w, d = t.grid
    if dims != (d, w, h):
        b = b[:d, :w, :h]
    return D.reshape(b, (h * w * d, t.feat))


def swin_block(t: TokenGrid, p, M: int, heads: int, shift: int, eps: float = 1e-5) -> TokenGrid:
    """One pre-norm transformer block with (shifted) window attention."""
    x = t.values
    h = D.layer_norm(x, p["ln1.g"], p["ln1.b"], eps)
    h = _windowed_attention(TokenGrid(t.grid, h), AttentionParams.from_view(p.view("attn")), M, heads, shift)
    x = x + h
    h = D.layer_norm(x, p["ln2.g"], p["ln2.b"], eps)
    h = D.linear(D.gelu(D.linear(h, p["mlp.w1"], p["mlp.b1"])), p["mlp.w2"], p["mlp.b2"])
    return TokenGrid(t.grid, x + h)


def swin_block_pair(t: TokenGrid, p, M: int, heads: int, eps: float = 1e-5) -> TokenGrid:
    """W-MSA block (``b0``) followed by SW-MSA block (``b1``) shifted by ``M // 2``."""
    t = swin_block(t, p.view("b0"), M, heads, 0, eps)
    return swin_block(t, p.view("b1"), M, heads, M // 2, eps)


def patch_embed(x: Tensor, cfg: EncoderConfig, p) -> TokenGrid:
    """Flatten non-overlapping ``patch^3`` cubes and project them to ``C`` features.

    Patch features are ordered (channel, dh, dw, dd).
    """
    x = D.as_tensor(x)
    S, H, W, Dz = x.shape
    pt = cfg.patch
    if S != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {S}")
    if H % pt or W % pt or Dz % pt:
        raise ShapeError(f"extents {(H, W, Dz)} not divisible by patch {pt}")
    h, w, d = H // pt, W // pt, Dz // pt
    v = D.reshape(x, (S, h, pt, w, pt, d, pt))
    v = D.transpose(v, (5, 3, 1, 0, 2, 4, 6))
    v = D.reshape(v, (d * w * h, S * pt ** 3))
    return TokenGrid((h, w, d), D.linear(v, p["w"], p["b"]))


def patch_merge(t: TokenGrid, w_down: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> TokenGrid:
    """Concatenate each 2x2x2 neighbourhood (8*feat), layer-normalize, project to 2*feat.

    Neighbour ``n = 4*dz + 2*dy + dx`` occupies features ``[n*feat, (n+1)*feat)``.
    Odd extents are zero padded first. The projection has no bias.
    """
    b = _pad_block(t.block(), 2)
    a0, a1, a2, f = b.shape
    v = D.reshape(b, (a0 // 2, 2, a1 // 2, 2, a2 // 2, 2, f))
    v = D.transpose(v, (0, 2, 4, 1, 3, 5, 6))
    v = D.reshape(v, (-1, 8 * f))
    v = D.linear(D.layer_norm(v, gamma, beta, eps), w_down)
    return TokenGrid((a2 // 2, a1 // 2, a0 // 2), v)


def encoder_forward(x, cfg: EncoderConfig, p) -> list[Tensor]:
    """Multi-scale features ``[f0, ..., f5]`` as channel-first dense tensors.

    ``f0`` is the input itself, ``f1..f4`` the stage outputs and ``f5`` the
    bottleneck after the last patch merge.
    """
    x = D.as_tensor(x)
    feats = [x]
    t = patch_embed(x, cfg, p.view("embed"))
    for s, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
        for k in range(depth // 2):
            t = swin_block_pair(t, p.view(f"stage{s}.pair{k}"), cfg.M, heads, cfg.eps)
        feats.append(t.to_dense())
        m = p.view(f"merge{s}")
        t = patch_merge(t, m["w"], m["ln.g"], m["ln.b"], cfg.eps)
    feats.append(t.to_dense())
    return feats


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, store: ParamStore | None = None,
                 prefix: str = "enc") -> ParamStore:
    """Truncated-normal(0.02) projections, zero biases, unit norm gains."""
    store = ParamStore() if store is None else store
    pre = prefix + "." if prefix else ""
    C, pt = cfg.C, cfg.patch
    store.add(pre + "embed.w", trunc_normal(rng, (cfg.in_channels * pt ** 3, C)))
    store.add(pre + "embed.b", np.zeros(C))
    for s, (width, heads) in enumerate(zip(cfg.widths, cfg.heads)):
        for k in range(cfg.depths[s] // 2):
            for blk in ("b0", "b1"):
                q = f"{pre}stage{s}.pair{k}.{blk}."
                store.add(q + "ln1.g", np.ones(width))
                store.add(q + "ln1.b", np.zeros(width))
                for name in ("wq", "wk", "wv", "wo"):
                    store.add(q + "attn." + name, trunc_normal(rng, (width, width)))
                if cfg.rel_pos_bias:
                    store.add(q + "attn.rel_table", trunc_normal(rng, ((2 * cfg.M - 1) ** 3, heads)))
                store.add(q + "ln2.g", np.ones(width))
                store.add(q + "ln2.b", np.zeros(width))
                hidden = cfg.mlp_ratio * width
                store.add(q + "mlp.w1", trunc_normal(rng, (width, hidden)))
                store.add(q + "mlp.b1", np.zeros(hidden))
                store.add(q + "mlp.w2", trunc_normal(rng, (hidden, width)))
                store.add(q + "mlp.b2", np.zeros(width))
        store.add(f"{pre}merge{s}.ln.g", np.ones(8 * width))
        store.add(f"{pre}merge{s}.ln.b", np.zeros(8 * width))
        store.add(f"{pre}merge{s}.w", trunc_normal(rng, (8 * width, 2 * width)))
    return store
