from . import ops
from .gradcheck import finite_diff_check
from .ops import (
    REGISTRY,
    add,
    clip,
    concat,
    depthwise_conv1d,
    dilated_depthwise_conv1d,
    div,
    elu,
    exp,
    getitem,
    leaky_relu,
    log,
    matmul,
    mean,
    minimum,
    mul,
    neg,
    pointwise_conv,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    square,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
)
from .ops import sum as sum_  # noqa: F401
from .tensor import NonFiniteError, OpRecord, Tensor, as_tensor, no_grad, set_debug

__all__ = [
    "Tensor", "OpRecord", "NonFiniteError", "no_grad", "set_debug", "as_tensor",
    "finite_diff_check", "REGISTRY", "ops",
]
