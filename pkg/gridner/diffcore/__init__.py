"""Minimal reverse-mode differentiable tensor core."""

from gridner.diffcore.gradcheck import grad_check, injected_fault
from gridner.diffcore.ops import (
    LSTMWeights,
    add,
    bilinear,
    bilstm,
    concat,
    conditional_affine,
    conv2d_dilated,
    dropout,
    elementwise,
    embedding_lookup,
    gelu,
    layer_norm,
    masked_cross_entropy,
    matmul,
    mul,
    pairwise_add,
    reshape,
    scale,
    slice_axis,
    softmax,
    sum_all,
    transpose,
)
from gridner.diffcore.tensor import (
    Tape,
    Tensor,
    backward,
    create,
    get_default_dtype,
    get_generator,
    manual_seed,
    no_record,
    set_default_dtype,
)

__all__ = [
    "LSTMWeights",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "bilinear",
    "bilstm",
    "concat",
    "conditional_affine",
    "conv2d_dilated",
    "create",
    "dropout",
    "elementwise",
    "embedding_lookup",
    "gelu",
    "get_default_dtype",
    "get_generator",
    "grad_check",
    "injected_fault",
    "layer_norm",
    "manual_seed",
    "masked_cross_entropy",
    "matmul",
    "mul",
    "no_record",
    "pairwise_add",
    "reshape",
    "scale",
    "set_default_dtype",
    "slice_axis",
    "softmax",
    "sum_all",
    "transpose",
]
