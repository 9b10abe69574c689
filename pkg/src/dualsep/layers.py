"""LSTM, fully-connected and layer-normalization building blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    Rng,
    ShapeError,
    Tensor,
    _make,
    add,
    as_tensor,
    concat,
    cumsum,
    div,
    matmul,
    mean,
    mul,
    relu,
    reverse_time,
    sigmoid,
    slice_,
    sqrt,
    sub,
    sum_,
    tanh,
    transpose,
    variance,
)


@dataclass
class SequenceFeature:
    """A (K frames x N channels) feature with its frame rate."""

    values: Tensor
    frame_hop_ms: float = 0.0

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim < 2 or self.values.shape[-2] < 1 or self.values.shape[-1] < 1:
            raise ShapeError(f"sequence feature needs shape (..., K>=1, N>=1), got {self.values.shape}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[-2]

    @property
    def n_channels(self) -> int:
        return self.values.shape[-1]


def _unwrap(x) -> tuple[Tensor, float | None]:
    if isinstance(x, SequenceFeature):
        return x.values, x.frame_hop_ms
    return as_tensor(x), None


def _rewrap(out: Tensor, hop):
    return out if hop is None else SequenceFeature(out, hop)


@dataclass
class FcParams:
    weight: Tensor  # (out_dim, in_dim)
    bias: Tensor  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: Rng, dtype=np.float64) -> "FcParams":
        bound = 1.0 / np.sqrt(in_dim)
        return cls(
            Tensor(rng.uniform(-bound, bound, (out_dim, in_dim), dtype), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, (out_dim,), dtype), requires_grad=True),
        )

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, dtype=np.float64) -> "FcParams":
        return cls(
            Tensor(np.zeros((out_dim, in_dim), dtype), requires_grad=True),
            Tensor(np.zeros(out_dim, dtype), requires_grad=True),
        )

    def named_parameters(self, prefix: str = ""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


@dataclass
class LstmParams:
    """Gate blocks are stacked in the order input, forget, cell, output."""

    W: Tensor  # (4H, in)
    U: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: Rng, dtype=np.float64) -> "LstmParams":
        bound = 1.0 / np.sqrt(hidden_dim)
        h4 = 4 * hidden_dim
        return cls(
            Tensor(rng.uniform(-bound, bound, (h4, input_dim), dtype), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, (h4, hidden_dim), dtype), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, (h4,), dtype), requires_grad=True),
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, dtype=np.float64) -> "LstmParams":
        h4 = 4 * hidden_dim
        return cls(
            Tensor(np.zeros((h4, input_dim), dtype), requires_grad=True),
            Tensor(np.zeros((h4, hidden_dim), dtype), requires_grad=True),
            Tensor(np.zeros(h4, dtype), requires_grad=True),
        )

    def named_parameters(self, prefix: str = ""):
        yield prefix + "W", self.W
        yield prefix + "U", self.U
        yield prefix + "b", self.b


@dataclass
class NormParams:
    gamma: Tensor  # (N,)
    beta: Tensor  # (N,)
    eps: float = 1e-8

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.gamma.shape != self.beta.shape:
            raise ShapeError("gamma and beta must have the same length")

    @classmethod
    def init(cls, n: int, eps: float = 1e-8, dtype=np.float64) -> "NormParams":
        return cls(
            Tensor(np.ones(n, dtype), requires_grad=True),
            Tensor(np.zeros(n, dtype), requires_grad=True),
            eps,
        )

    def named_parameters(self, prefix: str = ""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta


# ---------------------------------------------------------------------------
# fully connected


def fc_forward(p: FcParams, x):
    x, hop = _unwrap(x)
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"fc expects {p.in_dim} input channels, got {x.shape[-1]}")
    return _rewrap(add(matmul(x, transpose(p.weight, (1, 0))), p.bias), hop)


# ---------------------------------------------------------------------------
# LSTM


def lstm_step(p: LstmParams, x_t, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    """One cell update built from primitive ops (reference path, slow)."""
    x_t, h_prev, c_prev = as_tensor(x_t), as_tensor(h_prev), as_tensor(c_prev)
    H = p.hidden_dim
    if x_t.shape[-1] != p.input_dim or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError("lstm_step: dimension mismatch")
    x2 = x_t if x_t.ndim > 1 else slice_(x_t, (None, slice(None)))
    h2 = h_prev if h_prev.ndim > 1 else slice_(h_prev, (None, slice(None)))
    z = add(add(matmul(x2, transpose(p.W, (1, 0))), matmul(h2, transpose(p.U, (1, 0)))), p.b)
    i = sigmoid(slice_(z, (..., slice(0, H))))
    f = sigmoid(slice_(z, (..., slice(H, 2 * H))))
    g = tanh(slice_(z, (..., slice(2 * H, 3 * H))))
    o = sigmoid(slice_(z, (..., slice(3 * H, 4 * H))))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    if x_t.ndim == 1:
        h, c = slice_(h, 0), slice_(c, 0)
    return h, c


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_scan(p: LstmParams, x) -> Tensor:
    """Forward-in-time LSTM over axis -2 of ``x`` (..., K, in) from a zero state.

    Fused op: one graph node whose backward pass is hand-written
    backpropagation through time.
    """
    x = as_tensor(x)
    H = p.hidden_dim
    if x.shape[-1] != p.input_dim:
        raise ShapeError(f"lstm expects {p.input_dim} input channels, got {x.shape[-1]}")
    K = x.shape[-2]
    if K < 1:
        raise ShapeError("lstm on an empty sequence")
    lead = x.shape[:-2]
    xb = x.data.reshape((-1, K, p.input_dim))
    B = xb.shape[0]
    W, U, b = p.W.data, p.U.data, p.b.data
    dtype = np.result_type(xb.dtype, W.dtype)

    zx = xb @ W.T + b
    UT = U.T
    gates = np.empty((B, K, 4 * H), dtype)
    cs = np.empty((B, K + 1, H), dtype)
    hs = np.empty((B, K + 1, H), dtype)
    tcs = np.empty((B, K, H), dtype)
    cs[:, 0] = 0.0
    hs[:, 0] = 0.0
    for t in range(K):
        z = zx[:, t] + hs[:, t] @ UT
        act = gates[:, t]
        act[:, : 2 * H] = _sig(z[:, : 2 * H])
        act[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        act[:, 3 * H :] = _sig(z[:, 3 * H :])
        cs[:, t + 1] = act[:, H : 2 * H] * cs[:, t] + act[:, :H] * act[:, 2 * H : 3 * H]
        tcs[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = act[:, 3 * H :] * tcs[:, t]

    def bw(g):
        dH = g.reshape((B, K, H))
        dz_all = np.empty((B, K, 4 * H), dtype)
        dh_next = np.zeros((B, H), dtype)
        dc_next = np.zeros((B, H), dtype)
        for t in range(K - 1, -1, -1):
            act = gates[:, t]
            i, f, gg, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
            dh = dH[:, t] + dh_next
            tc = tcs[:, t]
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ U
        flat_dz = dz_all.reshape(-1, 4 * H)
        dU = flat_dz.T @ hs[:, :K].reshape(-1, H)
        dW = flat_dz.T @ xb.reshape(-1, p.input_dim)
        db = flat_dz.sum(axis=0)
        dx = (dz_all @ W).reshape(x.shape)
        return dx, dW, dU, db

    out = hs[:, 1:].reshape(lead + (K, H))
    return _make(out, (x, p.W, p.U, p.b), bw, "lstm_scan")


def lstm_sequence(p: LstmParams, x, direction: str = "forward"):
    x, hop = _unwrap(x)
    if direction == "forward":
        out = lstm_scan(p, x)
    elif direction == "backward":
        out = reverse_time(lstm_scan(p, reverse_time(x)))
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', not {direction!r}")
    return _rewrap(out, hop)


def bilstm_forward(pf: LstmParams, pb: LstmParams, x):
    if pf.hidden_dim != pb.hidden_dim:
        raise ShapeError("forward and backward LSTMs must share hidden_dim")
    x, hop = _unwrap(x)
    out = concat([lstm_sequence(pf, x, "forward"), lstm_sequence(pb, x, "backward")], axis=-1)
    return _rewrap(out, hop)


# ---------------------------------------------------------------------------
# normalization


def _affine(p: NormParams, normed: Tensor) -> Tensor:
    if normed.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(f"norm expects {p.gamma.shape[0]} channels, got {normed.shape[-1]}")
    return add(mul(normed, p.gamma), p.beta)


def gln_forward(p: NormParams, F, axes=(-2, -1)):
    """Layer norm with one mean/variance over all entries along ``axes``."""
    F, hop = _unwrap(F)
    mu = mean(F, axis=axes, keepdims=True)
    var = variance(F, axis=axes, keepdims=True)
    normed = div(sub(F, mu), sqrt(add(var, p.eps)))
    return _rewrap(_affine(p, normed), hop)


def cln_forward(p: NormParams, F, time_axis: int = -2):
    """Cumulative layer norm.

    Statistics at step k cover every entry of steps 1..k along ``time_axis``
    and all axes after it, using biased running sums of values and squares.
    """
    F, hop = _unwrap(F)
    time_axis %= F.ndim
    rest = tuple(range(time_axis + 1, F.ndim))
    per_step = int(np.prod([F.shape[a] for a in rest]))
    s1 = sum_(F, axis=rest, keepdims=True)
    s2 = sum_(mul(F, F), axis=rest, keepdims=True)
    count_shape = [1] * F.ndim
    count_shape[time_axis] = F.shape[time_axis]
    count = (np.arange(1, F.shape[time_axis] + 1, dtype=F.dtype) * per_step).reshape(count_shape)
    mu = div(cumsum(s1, time_axis), count)
    var = relu(sub(div(cumsum(s2, time_axis), count), mul(mu, mu)))
    normed = div(sub(F, mu), sqrt(add(var, p.eps)))
    return _rewrap(_affine(p, normed), hop)


class StreamingCLN:
    """Frame-by-frame cLN with O(1) state: running count, sum and sum of squares."""

    def __init__(self, p: NormParams):
        self.p = p
        self.reset()

    def reset(self) -> None:
        self.count = 0
        self.total = 0.0
        self.total_sq = 0.0

    def step(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame)
        self.count += frame.size
        self.total += float(frame.sum())
        self.total_sq += float((frame * frame).sum())
        mu = self.total / self.count
        var = max(self.total_sq / self.count - mu * mu, 0.0)
        return (frame - mu) / np.sqrt(var + self.p.eps) * self.p.gamma.data + self.p.beta.data
