"""Differentiable primitives.

Each function computes its forward value with numpy and registers the
adjoint on the tape via :func:`record`. Elementwise binaries follow numpy
broadcasting; the adjoint sums the incoming gradient back over broadcast
axes.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import InvalidInputError, ShapeError
from .core import Tensor, accumulate, record

BCE_CLAMP = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise binaries
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def _backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return record(out, (a, b), _backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def _backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return record(out, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "elementwise_mul")
    out = Tensor(a.data * b.data)

    def _backward(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return record(out, (a, b), _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the last one by default)."""
    if not tensors:
        raise InvalidInputError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            accumulate(t, piece)

    return record(out, tuple(tensors), _backward)


_BINARY = {
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "concat_last_axis": lambda a, b: concat([a, b], axis=-1),
}


def apply_binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = _BINARY[kind]
    except KeyError:
        raise InvalidInputError(f"unknown binary op {kind!r}") from None
    return fn(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    out = Tensor(x.data * x.data.dtype.type(factor))

    def _backward(g):
        accumulate(x, g * factor)

    return record(out, (x,), _backward)


# ---------------------------------------------------------------------------
# unary maps
# ---------------------------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)

    def _backward(g):
        accumulate(x, g * (1.0 - t * t))

    return record(out, (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = Tensor(s)

    def _backward(g):
        accumulate(x, g * s * (1.0 - s))

    return record(out, (x,), _backward)


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    out = Tensor(np.maximum(x.data, 0).astype(x.dtype, copy=False))  # NaN propagates

    def _backward(g):
        accumulate(x, g * live)

    return record(out, (x,), _backward)


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}


def apply_unary(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise InvalidInputError(f"unknown unary op {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a [..., m, k] @ b [k, n]``; leading axes of ``a`` act as a batch."""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data)

    def _backward(g):
        accumulate(a, g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            accumulate(b, a2.T @ g.reshape(-1, g.shape[-1]))

    return record(out, (a, b), _backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` stored [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        y = y + bias.data
    out = Tensor(y)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        accumulate(x, g @ weight.data)
        g2 = g.reshape(-1, g.shape[-1])
        if weight.requires_grad:
            accumulate(weight, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None:
            accumulate(bias, g2.sum(axis=0))

    return record(out, parents, _backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)))

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.shape))

    return record(out, (x,), _backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def _backward(g):
        accumulate(x, g.reshape(x.shape))

    return record(out, (x,), _backward)


# ---------------------------------------------------------------------------
# attention, embedding, loss
# ---------------------------------------------------------------------------

def masked_softmax(x: Tensor, mask) -> Tensor:
    """Softmax over the last axis with dead positions forced to exactly 0.

    ``mask`` is boolean, same shape as ``x``; True marks a live position.
    Every row needs at least one live position.
    """
    live = np.asarray(mask, dtype=bool)
    if live.shape != x.shape:
        raise ShapeError(f"masked_softmax: mask {live.shape} vs input {x.shape}")
    if x.size and not live.any(axis=-1).all():
        raise InvalidInputError("masked_softmax: a row has every position masked")
    neg = np.where(live, x.data, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.where(live, np.exp(shifted), 0).astype(x.dtype)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def _backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        accumulate(x, p * (g - dot))

    return record(out, (x,), _backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` [V, d]; output shape is ``ids.shape + (d,)``."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = idx[(idx < 0) | (idx >= table.shape[0])][0]
        raise IndexError(f"token id {int(bad)} outside vocabulary of size {table.shape[0]}")
    out = Tensor(table.data[idx])

    def _backward(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            accumulate(table, dt)

    return record(out, (table,), _backward)


def bce_loss(predictions: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of Bernoulli labels.

    Predictions are clamped to [1e-7, 1 - 1e-7]; the gradient is zero where
    the clamp is active.
    """
    y = np.asarray(labels, dtype=predictions.dtype).reshape(predictions.shape)
    n = predictions.size
    if n == 0:
        raise InvalidInputError("bce_loss on an empty batch")
    p = predictions.data
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)
    out = Tensor(np.asarray(-ll.sum() / n, dtype=p.dtype))
    inside = (p >= BCE_CLAMP) & (p <= 1.0 - BCE_CLAMP)

    def _backward(g):
        d = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
        accumulate(predictions, g * d * inside)

    return record(out, (predictions,), _backward)
