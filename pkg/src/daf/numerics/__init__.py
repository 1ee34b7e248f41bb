"""Differentiable-computation core: tensors, ops, optimizer, checkpoints."""

from . import kernels
from .checkpoint import load_into, load_params, read_manifest, save_params
from .optim import Adam
from .params import ParamStore
from .tensor import (
    SequenceBuffer,
    Tensor,
    backward,
    concat,
    constant,
    conv1d,
    einsum2,
    grad_enabled,
    linear_seq,
    masked_softmax,
    matmul,
    mlp_forward,
    narrow,
    no_grad,
)

__all__ = [
    "Adam",
    "ParamStore",
    "SequenceBuffer",
    "Tensor",
    "backward",
    "concat",
    "constant",
    "conv1d",
    "einsum2",
    "grad_enabled",
    "kernels",
    "linear_seq",
    "load_into",
    "load_params",
    "masked_softmax",
    "matmul",
    "mlp_forward",
    "narrow",
    "no_grad",
    "read_manifest",
    "save_params",
]
