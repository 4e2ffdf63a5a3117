"""Reverse-mode automatic differentiation with recorded backward passes."""

from .conv import conv2d, conv2d_input_grad, conv2d_weight_grad, conv_output_size
from .functional import (
    accuracy,
    add_bias,
    batch_normalize,
    batchnorm_apply,
    cross_entropy,
    running_normalize,
)
from .params import ParamSet, finite_difference_oracle, grad, gradients
from .tensor import (
    ComputationRecord,
    Tensor,
    add,
    broadcast_to,
    check_numerics,
    default_dtype,
    div,
    exp,
    get_default_dtype,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    is_recording,
    no_record,
    relu,
    reshape,
    rsqrt,
    scale,
    set_check_numerics,
    set_default_dtype,
    softmax,
    stop_gradient,
    sub,
    sum_to,
    transpose,
    tsum,
)

__all__ = [
    "ComputationRecord", "ParamSet", "Tensor", "accuracy", "add", "add_bias",
    "batch_normalize", "batchnorm_apply", "broadcast_to", "check_numerics",
    "conv2d", "conv2d_input_grad", "conv2d_weight_grad", "conv_output_size",
    "cross_entropy", "default_dtype", "div", "exp", "finite_difference_oracle",
    "get_default_dtype", "grad", "gradients", "log", "log_softmax", "matmul",
    "is_recording", "mean", "mul", "neg", "no_record", "relu", "reshape", "rsqrt",
    "running_normalize", "scale", "set_check_numerics", "set_default_dtype",
    "softmax", "stop_gradient", "sub", "sum_to", "transpose", "tsum",
]
