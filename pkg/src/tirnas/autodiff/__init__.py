from .tensor import (
    DEFAULT_DTYPE,
    GradTape,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    global_avg_pool,
    index_select,
    log,
    matmul,
    mean_,
    mul,
    neg,
    no_grad,
    reduce_max,
    reduce_min,
    relu,
    reshape,
    set_debug_checks,
    sigmoid,
    slice_,
    softmax,
    sqrt,
    sub,
    sum_,
    transpose,
    weighted_sum,
)
from .conv import batchnorm, conv2d, conv_out_size, pool2d
from .macs import add_macs, count_macs, counting_active
from . import nn

__all__ = [
    "DEFAULT_DTYPE", "GradTape", "Tensor", "add", "as_tensor", "backward",
    "batchnorm", "clip", "concat", "conv2d", "conv_out_size", "count_macs",
    "counting_active", "add_macs", "div", "exp", "global_avg_pool",
    "index_select", "log", "matmul", "mean_", "mul", "neg", "nn", "no_grad",
    "pool2d", "reduce_max", "reduce_min", "relu", "reshape",
    "set_debug_checks", "sigmoid", "slice_", "softmax", "sqrt", "sub",
    "sum_", "transpose", "weighted_sum",
]
