"""Minimal dense-tensor engine with reverse-mode differentiation."""

from hsgt.engine.checkpoint import load_arrays, save_arrays
from hsgt.engine.functional import (
    cross_entropy,
    dropout,
    layer_norm,
    masked_softmax,
    pair_attention,
    segment_mean,
    softmax,
)
from hsgt.engine.gradcheck import finite_difference_check
from hsgt.engine.optim import AdamW
from hsgt.engine.tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    concat_cols,
    concat_rows,
    default_dtype,
    gather_rows,
    get_default_dtype,
    is_grad_enabled,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    scale,
    set_default_dtype,
    slice_rows,
    take_cols,
    transpose,
    tsum,
)

__all__ = [
    "AdamW",
    "Parameter",
    "Tensor",
    "add",
    "concat",
    "concat_cols",
    "concat_rows",
    "cross_entropy",
    "default_dtype",
    "dropout",
    "finite_difference_check",
    "gather_rows",
    "get_default_dtype",
    "is_grad_enabled",
    "layer_norm",
    "load_arrays",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "pair_attention",
    "relu",
    "reshape",
    "save_arrays",
    "scale",
    "segment_mean",
    "set_default_dtype",
    "slice_rows",
    "softmax",
    "take_cols",
    "transpose",
    "tsum",
]
