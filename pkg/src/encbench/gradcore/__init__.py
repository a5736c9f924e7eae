"""Minimal reverse-mode tensor engine."""
from .tensor import Graph, Tensor, backward
from .ops import (
    BatchNormState,
    add,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    linear,
    mean,
    mul,
    pixel_shuffle,
    relu,
    reshape,
    softmax_cross_entropy,
    straight_through,
    sub,
    sum,
)
from .optim import ParamSet, sgd_step

__all__ = [
    "BatchNormState", "Graph", "ParamSet", "Tensor", "add", "backward", "batchnorm2d",
    "conv2d", "global_avg_pool", "linear", "mean", "mul", "pixel_shuffle", "relu",
    "reshape", "sgd_step", "softmax_cross_entropy", "straight_through", "sub", "sum",
]
