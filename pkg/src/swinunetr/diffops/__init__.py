"""Differentiable operator kernels with tape-based reverse mode."""

from .conv import conv3d, conv3d_transpose
from .gradcheck import grad_check, grad_check_tensors
from .ops import (
    abs,
    add,
    concat,
    div,
    exp,
    gelu,
    getitem,
    global_avg_pool,
    instance_norm,
    l2_normalize,
    layer_norm,
    leaky_relu,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    pad,
    reshape,
    roll,
    softmax,
    square,
    stack,
    sub,
    sum,
    take,
    transpose,
    unbroadcast,
)
from .params import ParamStore, ParamView
from .tensor import Tape, Tensor, active_tape, as_tensor

__all__ = [
    "Tape", "Tensor", "ParamStore", "ParamView", "active_tape", "as_tensor",
    "abs", "add", "concat", "conv3d", "conv3d_transpose", "div", "exp", "gelu",
    "getitem", "global_avg_pool", "grad_check", "grad_check_tensors",
    "instance_norm", "l2_normalize", "layer_norm", "leaky_relu", "linear", "log",
    "log_softmax", "matmul", "mean", "mul", "neg", "pad", "reshape", "roll",
    "softmax", "square", "stack", "sub", "sum", "take", "transpose", "unbroadcast",
]
