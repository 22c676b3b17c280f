from sidemoe.numerics.gradcheck import finite_difference_check, numeric_gradient, relative_errors
from sidemoe.numerics.kernels import (
    DEFAULT_LN_EPS,
    cross_entropy_loss,
    gelu,
    layer_norm,
    layer_norm_backward,
    matmul,
    matmul_backward,
    softmax,
    softmax_backward,
)
from sidemoe.numerics.tape import GradTape, Var

__all__ = [
    "DEFAULT_LN_EPS",
    "GradTape",
    "Var",
    "cross_entropy_loss",
    "finite_difference_check",
    "gelu",
    "layer_norm",
    "layer_norm_backward",
    "matmul",
    "matmul_backward",
    "numeric_gradient",
    "relative_errors",
    "softmax",
    "softmax_backward",
]
