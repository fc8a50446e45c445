"""Differentiable layer kernels on dense float64 arrays.

Every layer comes as a ``forward`` returning ``(output, cache)`` and a
``backward`` that consumes the upstream gradient plus that cache and returns
:class:`LayerGrads`. Time series are laid out ``[batch, time, channels]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes violate a kernel's contract."""


@dataclass
class LayerGrads:
    dx: np.ndarray
    params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if min(self.filters, self.kernel, self.stride) < 1:
            raise ValueError(f"filters, kernel and stride must be positive: {self}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    def output_length(self, length: int) -> int:
        if self.padding == "same":
            return -(-length // self.stride)
        return (length - self.kernel) // self.stride + 1


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# temporal convolution
# ---------------------------------------------------------------------------

def _same_pad(length: int, spec: ConvSpec) -> tuple[int, int]:
    out = spec.output_length(length)
    total = max((out - 1) * spec.stride + spec.kernel - length, 0)
    return total // 2, total - total // 2


def conv1d(x, w, b, spec: ConvSpec):
    """Cross-correlate ``x[B,T,C]`` with filters ``w[F,K,C]`` along time."""
    x, w, b = _as_f64(x), _as_f64(w), _as_f64(b)
    if x.ndim != 3 or w.ndim != 3 or w.shape[2] != x.shape[2]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weights {w.shape}")
    if w.shape[0] != spec.filters or w.shape[1] != spec.kernel or b.shape != (spec.filters,):
        raise ShapeError(f"conv1d: weights {w.shape} / bias {b.shape} do not match {spec}")
    n, length, c = x.shape
    if spec.padding == "same":
        left, right = _same_pad(length, spec)
    else:
        if length < spec.kernel:
            raise ShapeError(f"conv1d: valid padding needs T >= K, got input {x.shape}, weights {w.shape}")
        left = right = 0
    xp = np.pad(x, ((0, 0), (left, right), (0, 0))) if left or right else x
    out_len = spec.output_length(length)
    # [B, T', C, K] -> [B, T', K, C] so columns line up with w.reshape(F, K*C)
    win = sliding_window_view(xp, spec.kernel, axis=1)[:, : (out_len - 1) * spec.stride + 1 : spec.stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n * out_len, spec.kernel * c)
    w2 = w.reshape(spec.filters, -1)
    y = (cols @ w2.T + b).reshape(n, out_len, spec.filters)
    cache = (cols, w2, x.shape, xp.shape, left, spec)
    return y, cache


def conv1d_backward(dy, cache) -> LayerGrads:
    cols, w2, x_shape, xp_shape, left, spec = cache
    n, out_len, f = dy.shape
    dy2 = dy.reshape(n * out_len, f)
    dw = (dy2.T @ cols).reshape(f, spec.kernel, x_shape[2])
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w2).reshape(n, out_len, spec.kernel, x_shape[2])
    dxp = np.zeros(xp_shape)
    stop = (out_len - 1) * spec.stride + 1
    for k in range(spec.kernel):
        dxp[:, k : k + stop : spec.stride] += dcols[:, :, k]
    dx = dxp[:, left : left + x_shape[1]]
    return LayerGrads(np.ascontiguousarray(dx), {"w": dw, "b": db})


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), False)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(), self.initialized)


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train",
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel normalization over every axis but the last.

    In ``train`` mode the batch statistics are used and ``state`` is updated
    in place; ``eval`` uses the running statistics.
    """
    x = _as_f64(x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if state.initialized:
            state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
            state.running_var = (1 - momentum) * state.running_var + momentum * var
        else:
            state.running_mean = mean.copy()
            state.running_var = var.copy()
            state.initialized = True
    elif mode == "eval":
        if not state.initialized:
            raise RuntimeError("uninitialized running statistics")
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std, gamma, mode, axes)


def batchnorm_backward(dy, cache) -> LayerGrads:
    xhat, inv_std, gamma, mode, axes = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if mode == "eval":
        dx = dxhat * inv_std
    else:
        m = dy.size // dy.shape[-1]
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return LayerGrads(dx, {"gamma": dgamma, "beta": dbeta})


# ---------------------------------------------------------------------------
# pointwise and affine
# ---------------------------------------------------------------------------

def relu(x):
    x = _as_f64(x)
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask) -> LayerGrads:
    return LayerGrads(dy * mask)


def dense(x, W, b):
    """Affine map ``x @ W + b`` over the last axis."""
    x = _as_f64(x)
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: input {x.shape} incompatible with W {W.shape}, b {b.shape}")
    return x @ W + b, (x, W)


def dense_backward(dy, cache) -> LayerGrads:
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return LayerGrads(dy @ W.T, {"W": x2.T @ dy2, "b": dy2.sum(axis=0)})


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax_t(logits, temperature: float = 1.0):
    """Temperature-softened softmax along the last axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = _as_f64(logits) / temperature
    if z.shape[-1] < 2:
        raise ShapeError(f"softmax_t needs at least 2 classes, got shape {z.shape}")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_t(logits, temperature: float = 1.0):
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = _as_f64(logits) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------
# Gate blocks are packed [input, forget, cell candidate, output] along the
# last axis of Wx[D,4H], Wh[H,4H] and b[4H].

def _check_lstm(D, Wx, Wh, b):
    H = Wh.shape[0]
    if Wx.shape != (D, 4 * H) or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm: input dim {D} incompatible with Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}")
    return H


def lstm_cell(x_t, h_prev, c_prev, params):
    Wx, Wh, b = params["Wx"], params["Wh"], params["b"]
    H = _check_lstm(x_t.shape[-1], Wx, Wh, b)
    z = x_t @ Wx + h_prev @ Wh + b
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_forward(x, params, h0=None, c0=None):
    """Run the recurrence over ``x[B,T,D]``; returns every hidden state ``[B,T,H]``."""
    x = _as_f64(x)
    Wx, Wh, b = params["Wx"], params["Wh"], params["b"]
    n, steps, d = x.shape
    H = _check_lstm(d, Wx, Wh, b)
    # time-major internals keep each step's slice contiguous
    xz = (x.transpose(1, 0, 2).reshape(steps * n, d) @ Wx + b).reshape(steps, n, 4 * H)
    gates = np.empty((steps, n, 4 * H))
    cs = np.empty((steps + 1, n, H))
    hs = np.empty((steps + 1, n, H))
    tcs = np.empty((steps, n, H))
    cs[0] = 0.0 if c0 is None else c0
    hs[0] = 0.0 if h0 is None else h0
    for t in range(steps):
        act = gates[t]
        np.matmul(hs[t], Wh, out=act)
        act += xz[t]
        act[:, : 2 * H] = _sigmoid(act[:, : 2 * H])
        act[:, 3 * H:] = _sigmoid(act[:, 3 * H:])
        np.tanh(act[:, 2 * H:3 * H], out=act[:, 2 * H:3 * H])
        c = cs[t + 1]
        np.multiply(act[:, H:2 * H], cs[t], out=c)
        c += act[:, :H] * act[:, 2 * H:3 * H]
        np.tanh(c, out=tcs[t])
        np.multiply(act[:, 3 * H:], tcs[t], out=hs[t + 1])
    out = hs[1:].transpose(1, 0, 2)
    return out, (x, gates, cs, hs, tcs, Wx, Wh)


def lstm_backward(dout, cache) -> LayerGrads:
    """Backpropagation through time given ``dout[B,T,H]`` on every hidden state."""
    x, gates, cs, hs, tcs, Wx, Wh = cache
    n, steps, d = x.shape
    H = Wh.shape[0]
    dout = np.ascontiguousarray(np.asarray(dout).transpose(1, 0, 2))
    dz = np.empty((steps, n, 4 * H))
    dh_next = np.zeros((n, H))
    dc = np.zeros((n, H))
    WhT = np.ascontiguousarray(Wh.T)
    for t in range(steps - 1, -1, -1):
        act = gates[t]
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        tc = tcs[t]
        dh = dout[t] + dh_next
        dc += dh * o * (1.0 - tc * tc)
        dzt = dz[t]
        dzt[:, :H] = dc * g * i * (1.0 - i)
        dzt[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
        dzt[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dzt[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc *= f
        dh_next = dzt @ WhT
    dz2 = dz.reshape(steps * n, 4 * H)
    dWx = x.transpose(1, 0, 2).reshape(steps * n, d).T @ dz2
    dWh = hs[:-1].reshape(steps * n, H).T @ dz2
    db = dz2.sum(axis=0)
    dx = (dz2 @ Wx.T).reshape(steps, n, d).transpose(1, 0, 2)
    return LayerGrads(np.ascontiguousarray(dx), {"Wx": dWx, "Wh": dWh, "b": db})
