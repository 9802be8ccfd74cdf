"""Minimal reverse-mode autodiff with the layers the detector needs."""

from .ops import (
    add,
    concat,
    conv2d,
    gather_last,
    log_softmax,
    max_pool2,
    mul,
    neg,
    relu,
    reshape,
    smooth_l1,
    softmax,
    softmax_xent,
    sum,
    transpose,
    xent_per_row,
)
from .tensor import Node, Tape, Tensor, backward, current_tape

__all__ = [
    "Node", "Tape", "Tensor", "backward", "current_tape",
    "add", "concat", "conv2d", "gather_last", "log_softmax", "max_pool2", "mul", "neg",
    "relu", "reshape", "smooth_l1", "softmax", "softmax_xent", "sum", "transpose", "xent_per_row",
]
