"""Minimal reverse-mode autodiff kernel over dense float64 arrays."""

from copycap.numcore.tensor import (
    Graph,
    NumericError,
    ShapeError,
    Tensor,
    add,
    assert_finite,
    backward,
    concat,
    dropout,
    embedding_gather,
    grad_enabled,
    layer_norm,
    log,
    matmul,
    multiply,
    no_grad,
    scale,
    slice_cols,
    softmax,
    sum_all,
    tanh,
    trace,
    transpose,
)
from copycap.numcore.gradcheck import gradcheck
from copycap.numcore.tensorfile import load_arrays, save_arrays

__all__ = [
    "Graph",
    "NumericError",
    "ShapeError",
    "Tensor",
    "add",
    "assert_finite",
    "backward",
    "concat",
    "dropout",
    "embedding_gather",
    "grad_enabled",
    "gradcheck",
    "layer_norm",
    "load_arrays",
    "log",
    "matmul",
    "multiply",
    "no_grad",
    "save_arrays",
    "scale",
    "slice_cols",
    "softmax",
    "sum_all",
    "tanh",
    "trace",
    "transpose",
]
