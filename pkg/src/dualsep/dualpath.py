"""Bi-RNN blocks that can run an online (causal) or offline (full-context) path.

Three block schemes share one parameter layout:

* ``STANDARD``: a plain Bi-LSTM block, offline only.
* ``DECOMPOSED``: online path uses the forward LSTM alone plus its own FC.
* ``REORGANIZED``: the second LSTM reads the reversed sequence offline and
  the original sequence online; the FC is shared by both paths.

Every block is ``x + norm(fc(rnn(x)))``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .layers import (
    FcParams,
    LstmParams,
    NormParams,
    SequenceFeature,
    _rewrap,
    _unwrap,
    cln_forward,
    fc_forward,
    gln_forward,
    lstm_scan,
)
from .numcore import Rng, ShapeError, Tensor, add, as_tensor, concat, frame, mul, overlap_add, pad, reverse_time, slice_, transpose


class PathSelector(enum.Enum):
    ONLINE = "online"
    OFFLINE = "offline"


class Scheme(enum.Enum):
    STANDARD = "standard"
    DECOMPOSED = "decomposed"
    REORGANIZED = "reorganized"


class PathError(ValueError):
    """Requested path does not exist for the block scheme."""


def _path(p) -> PathSelector:
    return p if isinstance(p, PathSelector) else PathSelector(p)


def _scheme(s) -> Scheme:
    return s if isinstance(s, Scheme) else Scheme(s)


@dataclass
class DualBlockParams:
    scheme: Scheme
    rnn1: LstmParams
    rnn2: LstmParams
    fc_offline: FcParams
    norm: NormParams
    fc_online: FcParams | None = None
    norm_kind: str = "cln"

    def __post_init__(self):
        self.scheme = _scheme(self.scheme)
        if self.rnn1.hidden_dim != self.rnn2.hidden_dim:
            raise ShapeError("rnn1 and rnn2 must share hidden_dim")
        if (self.scheme is Scheme.DECOMPOSED) != (self.fc_online is not None):
            raise ValueError("fc_online is required for, and only for, decomposed blocks")
        if self.norm_kind not in ("gln", "cln"):
            raise ValueError(f"norm_kind must be 'gln' or 'cln', not {self.norm_kind!r}")

    @property
    def hidden_dim(self) -> int:
        return self.rnn1.hidden_dim

    @property
    def n_channels(self) -> int:
        return self.fc_offline.out_dim

    @classmethod
    def init(
        cls,
        n_channels: int,
        hidden: int,
        scheme,
        rng: Rng,
        norm_kind: str = "cln",
        dtype=np.float64,
    ) -> "DualBlockParams":
        scheme = _scheme(scheme)
        return cls(
            scheme=scheme,
            rnn1=LstmParams.init(n_channels, hidden, rng, dtype),
            rnn2=LstmParams.init(n_channels, hidden, rng, dtype),
            fc_offline=FcParams.init(2 * hidden, n_channels, rng, dtype),
            norm=NormParams.init(n_channels, dtype=dtype),
            fc_online=FcParams.init(hidden, n_channels, rng, dtype) if scheme is Scheme.DECOMPOSED else None,
            norm_kind=norm_kind,
        )

    @classmethod
    def zeros(cls, n_channels: int, hidden: int, scheme, norm_kind: str = "cln", dtype=np.float64):
        scheme = _scheme(scheme)
        norm = NormParams.init(n_channels, dtype=dtype)
        return cls(
            scheme=scheme,
            rnn1=LstmParams.zeros(n_channels, hidden, dtype),
            rnn2=LstmParams.zeros(n_channels, hidden, dtype),
            fc_offline=FcParams.zeros(2 * hidden, n_channels, dtype),
            norm=norm,
            fc_online=FcParams.zeros(hidden, n_channels, dtype) if scheme is Scheme.DECOMPOSED else None,
            norm_kind=norm_kind,
        )

    def named_parameters(self, prefix: str = ""):
        yield from self.rnn1.named_parameters(prefix + "rnn1.")
        yield from self.rnn2.named_parameters(prefix + "rnn2.")
        yield from self.fc_offline.named_parameters(prefix + "fc_offline.")
        if self.fc_online is not None:
            yield from self.fc_online.named_parameters(prefix + "fc_online.")
        yield from self.norm.named_parameters(prefix + "norm.")

    def path_parameters(self, path) -> dict[str, Tensor]:
        """Parameters actually touched when running ``path``."""
        path = _path(path)
        named = dict(self.named_parameters())
        if path is PathSelector.OFFLINE:
            return {k: v for k, v in named.items() if not k.startswith("fc_online.")}
        if self.scheme is Scheme.STANDARD:
            raise PathError("a standard Bi-RNN block has no online path")
        if self.scheme is Scheme.DECOMPOSED:
            return {k: v for k, v in named.items() if not k.startswith(("rnn2.", "fc_offline."))}
        return named

    def n_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())


def rnn_transform(p: DualBlockParams, x: Tensor, path) -> Tensor:
    """RNN + dimension-matching FC part of a block, before norm and residual."""
    path = _path(path)
    if x.shape[-1] != p.n_channels or p.rnn1.input_dim != p.n_channels:
        raise ShapeError(f"block expects {p.n_channels} channels, got {x.shape[-1]}")
    if path is PathSelector.OFFLINE:
        fwd = lstm_scan(p.rnn1, x)
        bwd = reverse_time(lstm_scan(p.rnn2, reverse_time(x)))
        return fc_forward(p.fc_offline, concat([fwd, bwd], axis=-1))
    if p.scheme is Scheme.STANDARD:
        raise PathError("a standard Bi-RNN block has no online path")
    fwd = lstm_scan(p.rnn1, x)
    if p.scheme is Scheme.DECOMPOSED:
        return fc_forward(p.fc_online, fwd)
    return fc_forward(p.fc_offline, concat([fwd, lstm_scan(p.rnn2, x)], axis=-1))


def _default_norm(p: DualBlockParams) -> Callable[[Tensor], Tensor]:
    if p.norm_kind == "gln":
        return lambda z: gln_forward(p.norm, z)
    return lambda z: cln_forward(p.norm, z)


def dual_block_forward(p: DualBlockParams, x, path, norm_fn: Callable[[Tensor], Tensor] | None = None):
    """``x + norm(fc(rnn(x)))`` along the selected path.

    ``norm_fn`` overrides the statistics layout (used by the DPRNN block).
    """
    x, hop = _unwrap(x)
    z = rnn_transform(p, x, path)
    norm_fn = norm_fn or _default_norm(p)
    return _rewrap(add(x, norm_fn(z)), hop)


def stack_forward(blocks, x, path):
    """Apply ``blocks`` in order, all on the same path."""
    path = _path(path)
    x, hop = _unwrap(x)
    for block in blocks:
        x = dual_block_forward(block, x, path)
    return _rewrap(x, hop)


# ---------------------------------------------------------------------------
# chunking


@dataclass
class ChunkedFeature:
    """(..., C chunks, K_c frames, N channels) with 50% overlap."""

    values: Tensor
    hop: int
    pad_front: int
    pad_back: int

    @property
    def n_chunks(self) -> int:
        return self.values.shape[-3]

    @property
    def chunk_len(self) -> int:
        return self.values.shape[-2]

    @property
    def padded_len(self) -> int:
        return (self.n_chunks - 1) * self.hop + self.chunk_len

    @property
    def n_frames(self) -> int:
        return self.padded_len - self.pad_front - self.pad_back


def padded_length(n_frames: int, chunk_len: int, hop: int) -> int:
    """Least ``chunk_len + m*hop`` covering the front-padded sequence."""
    need = n_frames + hop
    if need <= chunk_len:
        return chunk_len
    return chunk_len + math.ceil((need - chunk_len) / hop) * hop


def chunk_split(x, chunk_len: int, hop: int) -> ChunkedFeature:
    if chunk_len != 2 * hop or hop < 1:
        raise ValueError(f"only 50% overlap is supported (chunk_len == 2*hop), got {chunk_len}, {hop}")
    x, _ = _unwrap(x)
    K = x.shape[-2]
    if K < 1:
        raise ShapeError("cannot chunk an empty sequence")
    total = padded_length(K, chunk_len, hop)
    back = total - K - hop
    widths = [(0, 0)] * (x.ndim - 2) + [(hop, back), (0, 0)]
    padded = pad(x, widths)
    nd = x.ndim
    # (..., L, N) -> (..., N, L) -> (..., N, C, Kc) -> (..., C, Kc, N)
    swapped = transpose(padded, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    framed = frame(swapped, chunk_len, hop)
    lead = tuple(range(nd - 2))
    values = transpose(framed, lead + (nd - 1, nd, nd - 2))
    return ChunkedFeature(values, hop, hop, back)


def coverage(n_chunks: int, chunk_len: int, hop: int) -> np.ndarray:
    """How many chunks contain each padded frame."""
    counts = np.zeros((n_chunks - 1) * hop + chunk_len)
    for c in range(n_chunks):
        counts[c * hop : c * hop + chunk_len] += 1
    return counts


def chunk_merge(c: ChunkedFeature):
    """Overlap-add chunks, divide by per-frame coverage, strip the padding."""
    values = as_tensor(c.values)
    if values.ndim < 3:
        raise ShapeError("chunked feature needs (..., C, K_c, N)")
    if c.chunk_len != 2 * c.hop or c.pad_front != c.hop or c.pad_back < 0 or c.n_frames < 1:
        raise ValueError(
            f"malformed chunk metadata: chunk_len={c.chunk_len} hop={c.hop} "
            f"pad_front={c.pad_front} pad_back={c.pad_back}"
        )
    nd = values.ndim
    lead = tuple(range(nd - 3))
    # (..., C, Kc, N) -> (..., N, C, Kc) -> (..., N, L)
    moved = transpose(values, lead + (nd - 1, nd - 3, nd - 2))
    summed = overlap_add(moved, c.hop)
    weights = 1.0 / coverage(c.n_chunks, c.chunk_len, c.hop)
    averaged = mul(summed, weights.astype(values.dtype))
    seq = transpose(averaged, lead + (nd - 2, nd - 3))
    index = (Ellipsis, slice(c.pad_front, c.pad_front + c.n_frames), slice(None))
    return slice_(seq, index)


# ---------------------------------------------------------------------------
# DPRNN


@dataclass
class DprnnBlockParams:
    intra: DualBlockParams
    inter: DualBlockParams

    def __post_init__(self):
        if self.intra.scheme is not Scheme.STANDARD:
            raise ValueError("the intra-chunk module is always a standard Bi-RNN block")

    @classmethod
    def init(
        cls, n_channels: int, hidden: int, scheme, rng: Rng, dtype=np.float64, inter_norm: str = "cln"
    ) -> "DprnnBlockParams":
        return cls(
            DualBlockParams.init(n_channels, hidden, Scheme.STANDARD, rng, "gln", dtype),
            DualBlockParams.init(n_channels, hidden, scheme, rng, inter_norm, dtype),
        )

    @classmethod
    def zeros(cls, n_channels: int, hidden: int, scheme, dtype=np.float64, inter_norm: str = "cln"):
        return cls(
            DualBlockParams.zeros(n_channels, hidden, Scheme.STANDARD, "gln", dtype),
            DualBlockParams.zeros(n_channels, hidden, scheme, inter_norm, dtype),
        )

    def named_parameters(self, prefix: str = ""):
        yield from self.intra.named_parameters(prefix + "intra.")
        yield from self.inter.named_parameters(prefix + "inter.")


def dprnn_block_forward(p: DprnnBlockParams, c: ChunkedFeature, path) -> ChunkedFeature:
    """Intra-chunk Bi-RNN, then inter-chunk RNN on the selected path.

    Offline, intra gLN statistics span the whole chunked tensor; online they
    are taken per chunk. Inter cLN accumulates over chunk index; an inter
    block configured for gLN uses whole-tensor statistics instead.
    """
    path = _path(path)
    x = as_tensor(c.values)
    squeeze = x.ndim == 3
    if squeeze:
        x = slice_(x, (None,))
    if path is PathSelector.OFFLINE:
        intra_norm = lambda z: gln_forward(p.intra.norm, z, axes=(1, 2, 3))  # noqa: E731
    else:
        intra_norm = lambda z: gln_forward(p.intra.norm, z, axes=(2, 3))  # noqa: E731
    y = dual_block_forward(p.intra, x, PathSelector.OFFLINE, norm_fn=intra_norm)

    # sequences along the chunk axis, one per within-chunk position
    across = transpose(y, (0, 2, 1, 3))
    z = transpose(rnn_transform(p.inter, across, path), (0, 2, 1, 3))
    if p.inter.norm_kind == "cln":
        y = add(y, cln_forward(p.inter.norm, z, time_axis=1))
    else:
        y = add(y, gln_forward(p.inter.norm, z, axes=(1, 2, 3)))
    if squeeze:
        y = slice_(y, 0)
    return ChunkedFeature(y, c.hop, c.pad_front, c.pad_back)


# ---------------------------------------------------------------------------
# latency


class Latency(NamedTuple):
    frames: int
    ms: float
    window_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.ms + self.window_ms


def latency_frames(model_kind: str, cfg) -> Latency:
    """Theoretical algorithmic latency of an online model.

    ``cfg`` needs ``win_ms`` and ``hop_ms`` (stacked_rnn) or ``chunk``,
    ``hop_ms`` and optionally ``win_ms`` (dprnn).
    """
    get = cfg.get if isinstance(cfg, dict) else lambda k, d=None: getattr(cfg, k, d)
    if model_kind == "stacked_rnn":
        return Latency(1, float(get("win_ms")))
    if model_kind == "dprnn":
        chunk = int(get("chunk"))
        return Latency(chunk, chunk * float(get("hop_ms")), float(get("win_ms", 0.0) or 0.0))
    raise ValueError(f"unknown model kind {model_kind!r}")
