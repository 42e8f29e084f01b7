"""Minimal dense tensors with reverse-mode differentiation."""
import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .core import DEFAULT_DTYPE, Parameter, Tape, Tensor, backward, grad_enabled, no_grad
from .gradcheck import numerical_gradient, relative_error
from .lstm import LSTMParams, lstm_forward
from .ops import (
    BCE_CLAMP,
    add,
    apply_binary,
    apply_unary,
    bce_loss,
    concat,
    embedding_lookup,
    linear,
    masked_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sub,
    sum,
    tanh,
)
from .optim import AdamState, adam_step, clip_grad_norm, zero_grads


def glorot_uniform(rng, shape, name: str, dtype=DEFAULT_DTYPE) -> Parameter:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); shape is [fan_out, fan_in]."""
    fan_out, fan_in = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-a, a, size=shape).astype(dtype), name=name)


def zeros_param(shape, name: str, dtype=DEFAULT_DTYPE) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), name=name)


__all__ = [
    "AdamState", "BCE_CLAMP", "DEFAULT_DTYPE", "LSTMParams", "Parameter", "Tape", "Tensor",
    "adam_step", "add", "apply_binary", "apply_unary", "backward", "bce_loss", "clip_grad_norm",
    "concat", "embedding_lookup", "glorot_uniform", "grad_enabled", "linear", "load_checkpoint",
    "lstm_forward", "masked_softmax", "matmul", "mean", "mul", "no_grad", "numerical_gradient",
    "relative_error", "relu", "reshape", "save_checkpoint", "scale", "sigmoid", "sub", "sum",
    "tanh", "zero_grads", "zeros_param",
]
