"""Dense tensors, reverse-mode differentiation, RNG and memory accounting."""

from .gradcheck import finite_diff_grad, relative_error
from .memory import MemoryTracker, track_memory
from .ops import (
    EmptySupportError,
    add,
    binary_cross_entropy,
    concat,
    cross_entropy,
    dropout,
    exp,
    index_select,
    layer_norm,
    log,
    log_sigmoid,
    logsumexp,
    masked_fill,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    slice_rows,
    softmax,
    sub,
    swap_last,
    take_along,
    scatter_add_rows,
    top_k,
    transpose,
)
from .ops import sum as tsum
from .rng import RngState
from .tensor import DimensionError, Tape, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "DimensionError", "EmptySupportError", "MemoryTracker", "RngState", "Tape", "Tensor",
    "add", "as_tensor", "backward", "binary_cross_entropy", "concat", "cross_entropy",
    "dropout", "exp", "finite_diff_grad", "grad_enabled", "index_select", "layer_norm",
    "log", "log_sigmoid", "logsumexp", "masked_fill", "masked_softmax", "matmul", "mean",
    "mul", "neg", "no_grad", "relative_error", "relu", "reshape", "slice_rows", "softmax",
    "scatter_add_rows", "sub", "swap_last", "take_along", "top_k", "track_memory", "transpose", "tsum",
]
