"""Minimal numpy tensor engine with reverse-mode autodiff."""

from .functional import (
    avg_pool2d,
    batch_norm,
    concat,
    conv2d,
    dense,
    dropout,
    global_avg_pool,
    multi_conv2d,
    relu,
    same_padding,
    softmax,
)
from .layers import (
    AvgPool2D,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    Layer,
    LayerProfile,
    ParallelConcat,
    ReLU,
    Sequential,
    Softmax,
)
from .optim import FP16_MAX, Adam, AdamState, adam_step, cast_fp16, lr_schedule
from .tensor import Tensor, as_tensor, make

__all__ = [
    "Adam", "AdamState", "AvgPool2D", "BatchNorm", "Conv2D", "Dense", "Dropout", "FP16_MAX",
    "GlobalAvgPool", "Layer", "LayerProfile", "ParallelConcat", "ReLU", "Sequential", "Softmax",
    "Tensor", "adam_step", "as_tensor", "avg_pool2d", "batch_norm", "cast_fp16", "concat", "conv2d",
    "dense", "dropout", "global_avg_pool", "lr_schedule", "make", "multi_conv2d", "relu", "same_padding", "softmax",
]
