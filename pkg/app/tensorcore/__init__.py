"""Minimal dense-tensor substrate with reverse-mode gradients."""

from app.tensorcore.checkpoint import load_checkpoint, save_checkpoint
from app.tensorcore.layers import Conv2d, Module
from app.tensorcore.ops import (
    absolute,
    avg_pool2d,
    bilinear_sample,
    clip,
    concat,
    conv2d,
    relu,
    sigmoid,
    softmax,
    stack,
    upsample_nearest,
)
from app.tensorcore.optim import SGD
from app.tensorcore.tensor import Parameter, Tensor, backward, default_dtype, float64_mode

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "Conv2d",
    "SGD",
    "backward",
    "default_dtype",
    "float64_mode",
    "conv2d",
    "bilinear_sample",
    "softmax",
    "sigmoid",
    "relu",
    "absolute",
    "clip",
    "avg_pool2d",
    "upsample_nearest",
    "concat",
    "stack",
    "save_checkpoint",
    "load_checkpoint",
]
