from .adam import AdamState, adam_step
from .functional import (
    PRIMITIVES,
    BatchNormStats,
    add,
    batch_norm,
    concat,
    conv2d,
    l2_normalize,
    matmul,
    max_pool2d,
    mse_mean,
    relu,
    reshape,
    scale,
    sigmoid,
    signed_sqrt,
    sum_over_axis,
    take,
    total,
    transpose,
)
from .gradcheck import grad_check, numeric_gradient, relative_error
from .tensor import Graph, Node, Tensor, backward, inject_backward_fault

__all__ = [
    "AdamState",
    "BatchNormStats",
    "Graph",
    "Node",
    "PRIMITIVES",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "batch_norm",
    "concat",
    "conv2d",
    "grad_check",
    "inject_backward_fault",
    "l2_normalize",
    "matmul",
    "max_pool2d",
    "mse_mean",
    "numeric_gradient",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "signed_sqrt",
    "sum_over_axis",
    "take",
    "total",
    "transpose",
]
