"""Layer zoo: activations, layer norm, attention, positional encoding, the
spiking gate, losses and a fused LSTM layer.  Every op is a differentiable
function of :class:`~hflab.nn.tensor.Tensor` inputs."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from hflab import kernels
from hflab.errors import IndivisibleHeads, OddDimension, QuantileOutOfRange, ShapeMismatch
from hflab.nn.tensor import Tensor, _accum, _result, _unbroadcast, add, as_tensor, matmul, reshape, transpose

LN_DEGENERATE = 1e-12


def linear(x, w, b=None) -> Tensor:
    """Row-wise ``x @ w + b``; ``x`` is (..., d_in), ``w`` (d_in, d_out), ``b`` (d_out,)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {w.shape}")
    y = matmul(x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeMismatch(f"linear: bias {b.shape} vs weight {w.shape}")
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# activations


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)

    def backward(g):
        _accum(x, g * s * (1.0 - s))

    return _result(s, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        _accum(x, g * (1.0 - t * t))

    return _result(t, (x,), backward)


def prelu(x, a) -> Tensor:
    """x if x >= 0 else a*x, with a learnable slope ``a`` (scalar or broadcastable)."""
    x, a = as_tensor(x), as_tensor(a)
    pos = x.data >= 0
    out = np.where(pos, x.data, a.data * x.data)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * np.where(pos, 1.0, a.data))
        if a.requires_grad:
            _accum(a, _unbroadcast(np.where(pos, 0.0, g * x.data), a.shape))

    return _result(out, (x, a), backward)


def softmax(x, mask=None) -> Tensor:
    """Row softmax over the last axis with max subtraction.

    ``mask`` (broadcastable, 1 = keep, 0 = drop) sends dropped logits to
    -inf; a row with every entry dropped returns zeros.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        keep = np.asarray(mask).astype(bool)
        z = np.where(keep, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def backward(g):
        _accum(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result(out, (x,), backward)


def activation(kind: str, x, a=None) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "prelu":
        if a is None:
            raise ValueError("prelu needs its slope parameter")
        return prelu(x, a)
    if kind in ("softmax", "softmax-row"):
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


def spiking_activation(x, threshold, temperature: float = 0.1, surrogate: bool = True) -> Tensor:
    """Gate that passes ``x`` where ``x >= threshold`` and emits 0 elsewhere.

    The forward value is always exact.  With ``surrogate`` the backward pass
    differentiates ``sigmoid((x - threshold)/T) * x`` instead, which gives the
    threshold a usable gradient; without it the exact a.e. derivative is used
    (1 on the passing side, 0 elsewhere, nothing for the threshold).
    """
    if not temperature > 0:
        raise ValueError("surrogate temperature must be positive")
    x, th = as_tensor(x), as_tensor(threshold)
    passing = x.data >= th.data
    out = np.where(passing, x.data, 0.0).astype(x.dtype, copy=False)

    def backward(g):
        if surrogate:
            s = _sigmoid_np((x.data - th.data) / temperature)
            ds = s * (1.0 - s) / temperature
            if x.requires_grad:
                _accum(x, g * (s + x.data * ds))
            if th.requires_grad:
                _accum(th, _unbroadcast(-g * x.data * ds, th.shape))
        else:
            if x.requires_grad:
                _accum(x, g * passing)

    return _result(out, (x, th), backward)


# ---------------------------------------------------------------------------
# normalisation


def layer_norm(y, gain=None, bias=None) -> Tensor:
    """Per-row (y - mean)/sigma with population sigma, then gain/bias.

    Rows with sigma < 1e-12 normalise to zeros (before gain/bias).
    """
    y = as_tensor(y)
    if y.shape[-1] < 2:
        raise ShapeMismatch("layer_norm needs rows of length >= 2")
    mu = y.data.mean(axis=-1, keepdims=True)
    yc = y.data - mu
    sigma = np.sqrt((yc * yc).mean(axis=-1, keepdims=True))
    degenerate = sigma < LN_DEGENERATE
    inv = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, sigma)).astype(y.dtype, copy=False)
    yhat = yc * inv
    gain = None if gain is None else as_tensor(gain)
    bias = None if bias is None else as_tensor(bias)
    out = yhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [y] + [p for p in (gain, bias) if p is not None]

    def backward(g):
        gyhat = g * gain.data if gain is not None else g
        if y.requires_grad:
            m1 = gyhat.mean(axis=-1, keepdims=True)
            m2 = (gyhat * yhat).mean(axis=-1, keepdims=True)
            _accum(y, inv * (gyhat - m1 - yhat * m2))
        if gain is not None and gain.requires_grad:
            _accum(gain, _unbroadcast(g * yhat, gain.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))

    return _result(out, parents, backward)


def add_norm(x, sublayer_out, gain=None, bias=None) -> Tensor:
    """LayerNorm(x + Sublayer(x)) given the already-computed sublayer output."""
    return layer_norm(add(x, sublayer_out), gain, bias)


# ---------------------------------------------------------------------------
# attention


def scaled_dot_attention(Q, K, V, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(d_q), masked) V over the last two axes.

    ``mask`` is (N, M) (or broadcastable) with 1 = attend, 0 = blocked.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[-2:] != (Q.shape[-2], K.shape[-2]):
            raise ShapeMismatch(f"mask {mask.shape} vs scores ({Q.shape[-2]}, {K.shape[-2]})")
    d_q = Q.shape[-1]
    scores = matmul(Q, transpose_last(K)) * (1.0 / math.sqrt(d_q))
    return matmul(softmax(scores, mask), V)


def transpose_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=np.int8))


def head_width(d_model: int, heads: int, head_dim: int | None = None) -> int:
    if heads < 1:
        raise IndivisibleHeads("need at least one head")
    if head_dim is not None:
        return int(head_dim)
    if d_model % heads:
        raise IndivisibleHeads(f"d_model={d_model} not divisible by {heads} heads")
    return d_model // heads


def multi_head_attention(x, params: Mapping[str, Tensor], heads: int, prefix: str = "",
                         mask=None, memory=None) -> Tensor:
    """Multi-head attention of ``x`` (B, L, d) over itself or over ``memory``.

    ``params`` holds ``{prefix}w_q, w_k, w_v`` (d, h*dh) with biases
    ``b_q, b_k, b_v`` (h*dh,) and ``w_o`` (h*dh, d), ``b_o`` (d,).  The per-head
    width is ``w_q.shape[1] // heads``.
    """
    x = as_tensor(x)
    src = x if memory is None else as_tensor(memory)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
        src = reshape(src, (1,) + src.shape) if src.ndim == 2 else src
    p = lambda k: params[prefix + k]  # noqa: E731
    width = p("w_q").shape[1]
    if width % heads:
        raise IndivisibleHeads(f"projection width {width} not divisible by {heads} heads")
    dh = width // heads
    B, L, _ = x.shape
    M = src.shape[1]

    def split(t, n):
        return transpose(reshape(t, (B, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, p("w_q"), p("b_q")), L)
    k = split(linear(src, p("w_k"), p("b_k")), M)
    v = split(linear(src, p("w_v"), p("b_v")), M)
    att = scaled_dot_attention(q, k, v, mask)
    merged = reshape(transpose(att, (0, 2, 1, 3)), (B, L, width))
    out = linear(merged, p("w_o"), p("b_o"))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def sinusoidal_pe(L: int, d: int) -> np.ndarray:
    """PE[n, 2i] = sin(n / 10000^(2i/d)), PE[n, 2i+1] = cos(n / 10000^(2i/d))."""
    if d % 2:
        raise OddDimension(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(L, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)[None, :]
    pe = np.empty((L, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


# ---------------------------------------------------------------------------
# losses


def _check_pair(pred: Tensor, y: np.ndarray):
    if pred.shape != y.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {y.shape}")
    if pred.size == 0:
        raise ShapeMismatch("empty loss input")


def mse(pred, y) -> Tensor:
    pred = as_tensor(pred)
    y = np.asarray(y, dtype=pred.dtype)
    _check_pair(pred, y)
    d = pred.data - y
    out = np.asarray((d * d).mean(), dtype=pred.dtype)

    def backward(g):
        _accum(pred, g * (2.0 / d.size) * d)

    return _result(out, (pred,), backward)


def mae(pred, y) -> Tensor:
    pred = as_tensor(pred)
    y = np.asarray(y, dtype=pred.dtype)
    _check_pair(pred, y)
    d = pred.data - y
    out = np.asarray(np.abs(d).mean(), dtype=pred.dtype)

    def backward(g):
        _accum(pred, g * np.sign(d) / d.size)

    return _result(out, (pred,), backward)


def loss(kind: str, pred, y) -> Tensor:
    if kind == "mse":
        return mse(pred, y)
    if kind == "mae":
        return mae(pred, y)
    raise ValueError(f"unknown loss {kind!r}")


def quantile_loss(pred, y, quantiles: Sequence[float]) -> Tensor:
    """Mean over samples and quantiles of max(q*(y - p), (q - 1)*(y - p)).

    Under-prediction costs ``q`` per unit, so the minimiser of each column is
    the q-quantile of ``y``.  ``pred`` is (N, Q), ``y`` is (N,).
    """
    pred = as_tensor(pred)
    q = np.asarray(quantiles, dtype=pred.dtype)
    if np.any((q <= 0) | (q >= 1)):
        raise QuantileOutOfRange(f"quantiles must lie in (0, 1): {list(quantiles)}")
    y = np.asarray(y, dtype=pred.dtype).reshape(-1)
    if pred.ndim == 1 and q.shape[0] == 1:
        pred = reshape(pred, (-1, 1))
    if pred.ndim != 2 or pred.shape != (y.shape[0], q.shape[0]):
        raise ShapeMismatch(f"quantile predictions {pred.shape} vs {y.shape[0]} samples x {q.shape[0]} quantiles")
    r = y[:, None] - pred.data
    out = np.asarray(np.maximum(q * r, (q - 1.0) * r).mean(), dtype=pred.dtype)

    def backward(g):
        _accum(pred, g * np.where(r > 0, -q, 1.0 - q) / r.size)

    return _result(out, (pred,), backward)


# ---------------------------------------------------------------------------
# fused LSTM layer


def lstm_layer(x, w, b) -> Tensor:
    """One LSTM layer over a (B, L, d_in) sequence from zero state.

    ``w`` is (H + d_in, 4H) acting on ``[h_{t-1}, x_t]``; ``b`` is (4H,).  Gate
    blocks along the output axis are [forget | input | output | candidate].
    Returns the hidden sequence (B, L, H).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    G = w.shape[1]
    H = G // 4
    if G != 4 * H or w.shape[0] != H + x.shape[-1] or b.shape != (G,):
        raise ShapeMismatch(f"lstm: x{x.shape} w{w.shape} b{b.shape}")
    B, L, d_in = x.shape
    wh, wx = w.data[:H], w.data[H:]
    xw = (x.data.reshape(-1, d_in) @ wx).reshape(B, L, G) + b.data
    hs, cs, acts = kernels.lstm_forward(xw, wh)

    def backward(g):
        dz = kernels.lstm_backward(g, cs, acts, wh)
        dz2 = dz.reshape(-1, G)
        if x.requires_grad:
            _accum(x, (dz2 @ wx.T).reshape(x.shape))
        if w.requires_grad:
            h_prev = np.zeros_like(hs)
            h_prev[:, 1:] = hs[:, :-1]
            dwh = h_prev.reshape(-1, H).T @ dz2
            dwx = x.data.reshape(-1, d_in).T @ dz2
            _accum(w, np.concatenate([dwh, dwx], axis=0))
        if b.requires_grad:
            _accum(b, dz2.sum(axis=0))

    return _result(hs, (x, w, b), backward)
