"""Minimal dense tensors with reverse-mode automatic differentiation."""

from dslp.tensor.core import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    fresh_tape,
    grad_enabled,
    make_op,
    no_grad,
    set_default_dtype,
    set_finite_checks,
)
from dslp.tensor.ops import (
    add,
    attention,
    concat,
    dropout,
    embedding,
    exp,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_mean,
    matmul,
    mean,
    merge_heads,
    mul,
    nll_label_smoothed,
    relu,
    reshape,
    scale,
    smoothing_floor,
    softmax,
    split_heads,
    sub,
    transpose,
)
from dslp.tensor.ops import sum as tsum
from dslp.tensor.optim import AdamState, adam_step, inverse_sqrt_lr

__all__ = [
    "AdamState", "Tape", "Tensor", "adam_step", "add", "as_tensor", "attention", "backward",
    "concat", "current_tape", "default_dtype", "dropout", "embedding", "exp", "fresh_tape",
    "grad_enabled", "inverse_sqrt_lr", "layer_norm", "linear", "log", "log_softmax", "make_op",
    "masked_mean", "matmul", "mean", "merge_heads", "mul", "nll_label_smoothed", "no_grad",
    "relu", "reshape", "scale", "set_default_dtype", "set_finite_checks", "smoothing_floor",
    "softmax", "split_heads", "sub", "transpose", "tsum",
]
