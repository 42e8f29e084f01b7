"""One-layer LSTM as a single tape op with full backpropagation through time."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .core import Parameter, Tensor, accumulate, record
from .ops import _stable_sigmoid


class LSTMParams:
    """Weights of one LSTM layer; gate blocks are ordered (input, forget, candidate, output).

    ``w_input`` is [4h, d_in], ``w_hidden`` is [4h, h], ``bias`` is [4h].
    """

    def __init__(self, w_input: Parameter, w_hidden: Parameter, bias: Parameter):
        h = w_hidden.shape[1]
        if w_input.shape[0] != 4 * h or w_hidden.shape != (4 * h, h) or bias.shape != (4 * h,):
            raise ShapeError(
                f"LSTM weights disagree: w_input {w_input.shape}, w_hidden {w_hidden.shape}, bias {bias.shape}"
            )
        self.w_input = w_input
        self.w_hidden = w_hidden
        self.bias = bias

    @property
    def hidden_size(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_input.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.w_input, self.w_hidden, self.bias]


def lstm_forward(params: LSTMParams, inputs: Tensor) -> Tensor:
    """Run the recurrence from zero state; returns every hidden state.

    ``inputs`` is [T, d_in] or [B, T, d_in]; the result is [T, h] or
    [B, T, h] accordingly.
    """
    x = inputs.data
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != params.input_size:
        raise ShapeError(f"lstm_forward: input {inputs.shape} vs input size {params.input_size}")
    B, T, _ = x.shape
    H = params.hidden_size
    Wx, Wh, b = params.w_input.data, params.w_hidden.data, params.bias.data
    dtype = np.result_type(x.dtype, Wx.dtype)

    xw = x @ Wx.T + b  # input contributions for all steps at once
    hs = np.zeros((B, T + 1, H), dtype=dtype)
    cs = np.zeros((B, T + 1, H), dtype=dtype)
    gates = np.zeros((B, T, 4 * H), dtype=dtype)
    for t in range(T):
        z = xw[:, t] + hs[:, t] @ Wh.T
        i = _stable_sigmoid(z[:, :H])
        f = _stable_sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _stable_sigmoid(z[:, 3 * H:])
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)

    result = hs[:, 1:].copy()
    out = Tensor(result[0] if squeeze else result)

    def _backward(grad_out):
        gh_all = grad_out[None] if squeeze else grad_out
        dWx = np.zeros_like(Wx)
        dWh = np.zeros_like(Wh)
        db = np.zeros_like(b)
        dx = np.zeros_like(x)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        for t in reversed(range(T)):
            i, f, g, o = np.split(gates[:, t], 4, axis=1)
            c, c_prev, h_prev = cs[:, t + 1], cs[:, t], hs[:, t]
            tc = np.tanh(c)
            dh = gh_all[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    dh * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            dWx += dz.T @ x[:, t]
            dWh += dz.T @ h_prev
            db += dz.sum(axis=0)
            dx[:, t] = dz @ Wx
            dh_next = dz @ Wh
            dc_next = dc * f
        accumulate(inputs, dx[0] if squeeze else dx)
        accumulate(params.w_input, dWx)
        accumulate(params.w_hidden, dWh)
        accumulate(params.bias, db)

    return record(out, (inputs, params.w_input, params.w_hidden, params.bias), _backward)
