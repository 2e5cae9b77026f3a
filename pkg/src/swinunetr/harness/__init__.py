"""Optimizer, training loops, inference, checkpoints, configuration and CLI."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, resolve
from .infer import predict_labels, sliding_window_infer, window_starts
from .optim import OptimState, adamw_step, lr_schedule
from .train import TrainResult, finetune, pretrain, read_curve, segmentation_loss

__all__ = [
    "Checkpoint", "OptimState", "RunConfig", "TrainResult", "adamw_step", "finetune",
    "load_checkpoint", "lr_schedule", "predict_labels", "pretrain", "read_curve", "resolve",
    "save_checkpoint", "segmentation_loss", "sliding_window_infer", "window_starts",
]
