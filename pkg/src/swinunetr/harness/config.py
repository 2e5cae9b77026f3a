"""Run configuration: dataclass, key=value text form and precedence rules.

Precedence, lowest first: dataclass defaults, config file, ``SWIN3D_SEED``
environment variable (seed only), command-line flags.
"""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..model import ModelConfig

MODES = ("pretrain", "finetune", "infer", "eval", "phantom")
SEED_ENV = "SWIN3D_SEED"
MODEL_FIELDS = tuple(f.name for f in fields(ModelConfig))


@dataclass(frozen=True)
class RunConfig:
    mode: str = "pretrain"
    # model
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
    embed_dim: int = 512
    # data and outputs
    data_dir: str = ""
    val_dir: str = ""
    out_dir: str = "run"
    input: str = ""
    output: str = ""
    gt: str = ""
    checkpoint: str = ""
    init_checkpoint: str = ""
    resume: str = ""
    ct_window: bool = False
    # optimisation
    batch_size: int = 4
    steps: int = 1000
    warmup: int = 500
    lr: float = 4e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # pre-training
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    s: float = 0.3
    t: float = 0.5
    cutout_fill: str = "zero"
    # crops, inference, evaluation
    roi: tuple = (96, 96, 96)
    overlap: float = 0.5
    nsd_tol: float = 1.0
    flip_prob: float = 0.0
    # bookkeeping
    checkpoint_every: int = 0
    val_every: int = 0
    target_dice: float = 0.0
    # phantom generation
    n_phantoms: int = 4
    phantom_extents: tuple = (32, 32, 32)
    n_shapes: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("depths", "heads", "roi", "phantom_extents"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.roi) != 3 or len(self.phantom_extents) != 3:
            raise ConfigError("roi and phantom_extents need three values")
        if self.batch_size < 1 or self.steps < 0 or self.warmup < 0:
            raise ConfigError("batch_size must be >= 1, steps and warmup >= 0")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must lie in [0, 1)")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def model(self) -> ModelConfig:
        try:
            return ModelConfig(**{k: getattr(self, k) for k in MODEL_FIELDS})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def lambdas(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3)

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).replace(**parse_pairs(text))

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), base)


_TYPES = typing.get_type_hints(RunConfig)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(name: str, raw: str):
    """Convert the text form of field ``name`` to its declared type."""
    if name not in _TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    kind = _TYPES[name]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            vals = tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
            # a single value means a cube / constant tuple
            return vals * 3 if name in ("roi", "phantom_extents") and len(vals) == 1 else vals
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_pairs(text: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        out[key] = coerce(key, value)
    return out


def resolve(file=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Merge defaults, an optional config file, ``SWIN3D_SEED`` and explicit overrides."""
    env = os.environ if env is None else env
    cfg = RunConfig.from_file(file) if file else RunConfig()
    if env.get(SEED_ENV, "").strip():
        cfg = cfg.replace(seed=coerce("seed", env[SEED_ENV]))
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg


def check_paths(cfg: RunConfig) -> None:
    """Fail fast on referenced inputs that do not exist."""
    need = {
        "pretrain": ("data_dir",),
        "finetune": ("data_dir",),
        "infer": ("input", "checkpoint"),
        "eval": ("input", "gt"),
        "phantom": (),
    }[cfg.mode]
    for name in need:
        if not getattr(cfg, name):
            raise ConfigError(f"{cfg.mode} needs {name}")
    for name in ("data_dir", "val_dir", "input", "gt", "init_checkpoint", "resume"):
        value = getattr(cfg, name)
        if value and not Path(value).exists():
            raise ConfigError(f"{name} does not exist: {value}")
    if cfg.mode == "infer" and not Path(cfg.checkpoint).exists():
        raise ConfigError(f"checkpoint does not exist: {cfg.checkpoint}")
