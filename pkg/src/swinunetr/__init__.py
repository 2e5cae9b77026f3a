"""Swin UNETR in numpy: shifted-window 3D encoder, convolutional decoder,
self-supervised pre-training, phantom data and segmentation metrics."""

from .datapipe import LabeledVolume, Volume, gen_phantom, read_volume, write_volume
from .errors import ConfigError, DegenerateInputError, FormatError, NumericError, SamplingError, ShapeError
from .model import ModelConfig, SwinUNETR, tiny_config

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateInputError", "FormatError", "LabeledVolume", "ModelConfig",
    "NumericError", "SamplingError", "ShapeError", "SwinUNETR", "Volume", "gen_phantom",
    "read_volume", "tiny_config", "write_volume",
]
