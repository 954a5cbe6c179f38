"""Minimal reverse-mode differentiation engine on numpy arrays."""

from .gradcheck import GradCheckReport, grad_check
from .linalg import singular_values, singular_values_batch
from .ops import (
    abs,
    add,
    as_tensor,
    avg_pool2,
    channel_affine,
    concat,
    conv2d,
    exp,
    linear,
    matmul,
    mean,
    mul,
    neg,
    reshape,
    silu,
    sub,
    sum,
    take_rows,
    transpose,
    upsample2,
)
from .svd import jacobi_svd_batch, thin_svd_many
from .tensor import Tape, Tensor, default_dtype, precision

__all__ = [
    "GradCheckReport", "Tape", "Tensor", "abs", "add", "as_tensor", "avg_pool2",
    "channel_affine", "concat", "conv2d", "default_dtype", "exp", "grad_check",
    "jacobi_svd_batch", "linear", "matmul", "mean", "mul", "neg", "precision",
    "reshape", "silu", "singular_values", "singular_values_batch", "sub", "sum",
    "take_rows", "thin_svd_many", "transpose", "upsample2",
]
