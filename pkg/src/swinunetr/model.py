"""Swin UNETR: encoder + decoder (+ optional pre-training heads) over one ParamStore."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffops as D
from .datapipe import as_array
from .decoder import DecoderConfig, decoder_forward, init_decoder, segmentation_probs
from .diffops import ParamStore, Tensor
from .ssl import EMBED_DIM, init_ssl_heads, ssl_forward
from .swin3d import EncoderConfig, encoder_forward, init_encoder

ENCODER_FIELDS = ("patch", "C", "depths", "heads", "M", "in_channels", "rel_pos_bias", "mlp_ratio", "eps")


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture hyperparameter of the network."""

    patch: int = 2
    C: int = 48
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (3, 6, 12, 24)
    M: int = 4
    in_channels: int = 1
    n_classes: int = 14
    rel_pos_bias: bool = False
    mlp_ratio: int = 4
    eps: float = 1e-5
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(v) for v in self.depths))
        object.__setattr__(self, "heads", tuple(int(v) for v in self.heads))
        self.encoder  # validates

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(**{k: getattr(self, k) for k in ENCODER_FIELDS})

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig(n_classes=self.n_classes, base_width=self.C, in_channels=self.in_channels,
                             n_levels=len(self.depths) + 1, eps=self.eps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale configuration used by the tests: C=6, depths [2,2,2,2], M=2."""
    base = dict(C=6, depths=(2, 2, 2, 2), heads=(3, 6, 12, 24), M=2, n_classes=2, embed_dim=EMBED_DIM)
    base.update(overrides)
    return ModelConfig(**base)


class SwinUNETR:
    """Parameters plus forward passes for segmentation and pre-training.

    Parameter names are prefixed ``enc.``, ``dec.`` and ``ssl.``; the heads
    are only created with ``with_heads=True`` and are never used for
    segmentation.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, with_decoder: bool = True,
                 with_heads: bool = False, params: ParamStore | None = None):
        self.cfg = cfg
        if params is None:
            root = np.random.SeedSequence(seed)
            s_enc, s_dec, s_ssl = (np.random.default_rng(s) for s in root.spawn(3))
            params = ParamStore()
            init_encoder(cfg.encoder, s_enc, params, "enc")
            if with_decoder:
                init_decoder(cfg.decoder, s_dec, params, "dec")
            if with_heads:
                init_ssl_heads(cfg.encoder, s_ssl, params, "ssl", cfg.embed_dim)
        self.params = params

    def features(self, x) -> list[Tensor]:
        x = D.as_tensor(np.asarray(as_array(x), dtype=self.params.dtype))
        return encoder_forward(x, self.cfg.encoder, self.params.view("enc"))

    def logits(self, x) -> Tensor:
        return decoder_forward(self.features(x), self.cfg.decoder, self.params.view("dec"))

    def probs(self, x) -> np.ndarray:
        return segmentation_probs(self.logits(x)).data

    def ssl(self, x):
        return ssl_forward(self.features(x), self.params.view("ssl"))

    def astype(self, dtype) -> "SwinUNETR":
        return SwinUNETR(self.cfg, params=self.params.astype(dtype))

    def drop_heads(self) -> None:
        self.params.drop("ssl.")

    def add_decoder(self, seed: int) -> None:
        self.params.drop("dec.")
        init_decoder(self.cfg.decoder, np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[1]),
                     self.params, "dec")
