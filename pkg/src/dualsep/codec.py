"""Signal encoders and decoders.

Frequency domain: Hann-windowed STFT magnitude, resynthesised with the
mixture phase. Time domain: a learnable strided 1-D convolution encoder and
its transposed-convolution decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .layers import NormParams, SequenceFeature, cln_forward, gln_forward
from .numcore import (
    Rng,
    ShapeError,
    Tensor,
    _frame_array,
    _overlap_add_array,
    add,
    as_tensor,
    frame,
    matmul,
    mul,
    overlap_add,
    transpose,
)


@dataclass(frozen=True)
class StftConfig:
    sample_rate_hz: int = 8000
    win_ms: float = 32.0
    hop_ms: float = 8.0
    window: str = "hann"

    def __post_init__(self):
        win = self.win_ms * self.sample_rate_hz / 1000
        hop = self.hop_ms * self.sample_rate_hz / 1000
        if win != int(win) or hop != int(hop):
            raise ValueError("window and hop must be whole numbers of samples")
        if int(win) % int(hop):
            raise ValueError("hop must divide the window length")

    @property
    def win_length(self) -> int:
        return int(self.win_ms * self.sample_rate_hz / 1000)

    @property
    def hop_length(self) -> int:
        return int(self.hop_ms * self.sample_rate_hz / 1000)

    @property
    def n_bins(self) -> int:
        return self.win_length // 2 + 1

    def analysis_window(self) -> np.ndarray:
        # periodic Hann: squared-window overlap-add is constant for hop = win/4
        return scipy.signal.get_window(self.window, self.win_length, fftbins=True)


def n_stft_frames(cfg: StftConfig, n_samples: int) -> int:
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def stft_analyze(cfg: StftConfig, wav) -> tuple[SequenceFeature, np.ndarray]:
    """Magnitude (..., K, F) as a SequenceFeature and phase (..., K, F)."""
    wav = np.asarray(wav.data if isinstance(wav, Tensor) else wav)
    if wav.shape[-1] < cfg.win_length:
        raise ShapeError(f"need at least {cfg.win_length} samples, got {wav.shape[-1]}")
    frames = _frame_array(wav, cfg.win_length, cfg.hop_length) * cfg.analysis_window()
    spec = np.fft.rfft(frames, n=cfg.win_length, axis=-1)
    mag = np.abs(spec).astype(wav.dtype)
    return SequenceFeature(Tensor(mag), cfg.hop_ms), np.angle(spec)


def _irfft_bases(n: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    weight = np.full((n // 2 + 1, 1), 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    arg = 2 * np.pi * k * t / n
    return weight * np.cos(arg) / n, -weight * np.sin(arg) / n


def synthesis_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Overlap-added squared window, the normaliser of the resynthesis."""
    w2 = cfg.analysis_window() ** 2
    return _overlap_add_array(np.broadcast_to(w2, (n_frames, cfg.win_length)).copy(), cfg.hop_length)


def istft_synthesize(cfg: StftConfig, magnitude, phase: np.ndarray) -> Tensor:
    """Inverse STFT of ``magnitude * exp(i*phase)``; differentiable in magnitude.

    Samples the window never covers come out as zero.
    """
    mag = magnitude.values if isinstance(magnitude, SequenceFeature) else as_tensor(magnitude)
    phase = np.asarray(phase)
    if mag.shape[-2:] != phase.shape[-2:] or mag.shape[-1] != cfg.n_bins:
        raise ShapeError(f"magnitude {mag.shape} does not match phase {phase.shape} / {cfg.n_bins} bins")
    dtype = mag.dtype
    cr, ci = _irfft_bases(cfg.win_length)
    window = cfg.analysis_window()
    basis_re = Tensor((cr * window).astype(dtype))
    basis_im = Tensor((ci * window).astype(dtype))
    frames = add(
        matmul(mul(mag, np.cos(phase).astype(dtype)), basis_re),
        matmul(mul(mag, np.sin(phase).astype(dtype)), basis_im),
    )
    wav = overlap_add(frames, cfg.hop_length)
    env = synthesis_envelope(cfg, mag.shape[-2])
    inv = np.where(env > 1e-10 * env.max(), 1.0 / np.maximum(env, 1e-30), 0.0)
    return mul(wav, inv.astype(dtype))


# ---------------------------------------------------------------------------
# learnable conv codec


@dataclass
class ConvCodecParams:
    encoder: Tensor  # (n_kernels, kernel_len)
    decoder: Tensor  # (n_kernels, kernel_len)
    stride: int

    def __post_init__(self):
        if self.encoder.shape != self.decoder.shape:
            raise ShapeError("encoder and decoder bases must have the same shape")
        if self.stride * 2 != self.kernel_len:
            raise ValueError("stride must be half the kernel length")

    @property
    def n_kernels(self) -> int:
        return self.encoder.shape[0]

    @property
    def kernel_len(self) -> int:
        return self.encoder.shape[1]

    @classmethod
    def init(cls, sample_rate_hz: int, rng: Rng, n_kernels: int = 64, win_ms: float = 2.0, dtype=np.float64):
        kernel_len = int(round(win_ms * sample_rate_hz / 1000))
        bound = 1.0 / np.sqrt(kernel_len)
        return cls(
            Tensor(rng.uniform(-bound, bound, (n_kernels, kernel_len), dtype), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, (n_kernels, kernel_len), dtype), requires_grad=True),
            kernel_len // 2,
        )

    def named_parameters(self, prefix: str = ""):
        yield prefix + "encoder", self.encoder
        yield prefix + "decoder", self.decoder


def conv_encode(p: ConvCodecParams, wav) -> Tensor:
    """(..., T) samples -> (..., K, n_kernels) strided correlations."""
    wav = as_tensor(wav)
    if wav.shape[-1] < p.kernel_len:
        raise ShapeError(f"need at least {p.kernel_len} samples, got {wav.shape[-1]}")
    return matmul(frame(wav, p.kernel_len, p.stride), transpose(p.encoder, (1, 0)))


def conv_decode(p: ConvCodecParams, feat) -> Tensor:
    """(..., K, n_kernels) -> (..., (K-1)*stride + kernel_len) samples."""
    feat = as_tensor(feat)
    if feat.shape[-1] != p.n_kernels:
        raise ShapeError(f"decoder expects {p.n_kernels} channels, got {feat.shape[-1]}")
    return overlap_add(matmul(feat, p.decoder), p.stride)


def encoder_norm(norm: NormParams, feat, mode: str = "cln"):
    if mode == "cln":
        return cln_forward(norm, feat)
    if mode == "gln":
        return gln_forward(norm, feat)
    raise ValueError(f"mode must be 'gln' or 'cln', not {mode!r}")
