"""Synthetic two-speaker noisy mixtures and WAV file I/O.

Speakers are procedural harmonic sources with disjoint pitch bands, a
syllable-rate amplitude envelope and pauses. Noise is low-passed white noise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .numcore import Rng


class WavError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpeakerSpec:
    f0_range: tuple[float, float] = (100.0, 160.0)
    n_harmonics: int = 8
    envelope_rate_hz: float = 4.0  # 0 gives a constant envelope
    pause_prob: float = 0.25
    vibrato_depth: float = 0.02
    spectral_tilt: float = 1.0  # harmonic k has amplitude k**-tilt


SPEAKER_BANDS = ((90.0, 150.0), (220.0, 330.0))


@dataclass
class MixtureConfig:
    sample_rate_hz: int = 8000
    duration_s: float = 4.0
    overlap_range: tuple[float, float] = (0.0, 1.0)
    speaker_snr_range_db: tuple[float, float] = (0.0, 5.0)
    noise_snr_range_db: tuple[float, float] = (10.0, 20.0)
    reverb: bool = False
    reverb_ms: float = 50.0
    n_harmonics: int = 8
    level_rms: float = 0.05
    # fixed values override the sampled ones (tests, ablations)
    overlap: float | None = None
    speaker_snr_db: float | None = None
    noise_snr_db: float | None = None


@dataclass
class MixtureExample:
    mixture: np.ndarray
    sources: np.ndarray  # (2, T), reverberant targets
    noise: np.ndarray
    overlap_ratio: float
    speaker_snr_db: float
    noise_snr_db: float
    seed: int
    utt_id: str = ""
    active: list[tuple[int, int]] = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "overlap_ratio": self.overlap_ratio,
            "speaker_snr_db": self.speaker_snr_db,
            "noise_snr_db": self.noise_snr_db,
            "seed": self.seed,
            "active": [list(a) for a in self.active],
        }


def _smooth_gate(n: int, rate_hz: float, pause_prob: float, sr: int, rng: Rng) -> np.ndarray:
    """Syllable-like envelope: raised-cosine bumps, some of them silenced."""
    if rate_hz <= 0:
        return np.ones(n)
    syll = max(1, int(sr / rate_hz))
    n_syll = -(-n // syll)
    on = rng.uniform(0, 1, n_syll) >= pause_prob
    if not on.any():
        on[0] = True
    bump = np.sin(np.pi * (np.arange(syll) + 0.5) / syll) ** 0.5
    depth = rng.uniform(0.5, 1.0, n_syll)
    env = np.concatenate([bump * d * o for d, o in zip(depth, on)])
    return env[:n]


def synth_speaker(spec: SynthSpeakerSpec, n_samples: int, sample_rate_hz: int, rng: Rng) -> np.ndarray:
    """Harmonic source at a pitch drawn from ``spec.f0_range``; unit RMS unless silent."""
    if n_samples <= 0:
        raise ValueError("duration must be positive")
    if spec.n_harmonics == 0:
        return np.zeros(n_samples)
    t = np.arange(n_samples) / sample_rate_hz
    f0 = rng.uniform(*spec.f0_range)
    vib_rate = rng.uniform(3.0, 6.0)
    inst_f0 = f0 * (1.0 + spec.vibrato_depth * np.sin(2 * np.pi * vib_rate * t))
    phase = 2 * np.pi * np.cumsum(inst_f0) / sample_rate_hz
    nyquist = sample_rate_hz / 2
    wav = np.zeros(n_samples)
    for k in range(1, spec.n_harmonics + 1):
        if k * f0 * (1 + spec.vibrato_depth) >= nyquist:
            break
        wav += k ** (-spec.spectral_tilt) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    wav *= _smooth_gate(n_samples, spec.envelope_rate_hz, spec.pause_prob, sample_rate_hz, rng)
    rms = np.sqrt(np.mean(wav**2))
    return wav / rms if rms > 0 else wav


def synth_noise(n_samples: int, sample_rate_hz: int, rng: Rng) -> np.ndarray:
    white = rng.normal(n_samples)
    b, a = scipy.signal.butter(2, 0.6)
    return scipy.signal.lfilter(b, a, white)


def decaying_fir(sample_rate_hz: int, length_ms: float, rng: Rng, density: float = 0.1) -> np.ndarray:
    """Sparse exponentially decaying FIR with a unit direct path."""
    n = max(1, int(length_ms * sample_rate_hz / 1000))
    taps = np.zeros(n)
    taps[0] = 1.0
    hits = rng.uniform(0, 1, n) < density
    hits[0] = False
    decay = np.exp(-6.9 * np.arange(n) / n)  # -60 dB at the end
    taps[hits] = rng.normal(int(hits.sum())) * 0.3 * decay[hits]
    return taps


def _energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def make_mixture(rng: Rng, cfg: MixtureConfig, utt_id: str = "") -> MixtureExample:
    sr = cfg.sample_rate_hz
    T = int(round(cfg.duration_s * sr))
    overlap = cfg.overlap if cfg.overlap is not None else float(rng.uniform(*cfg.overlap_range))
    spk_snr = cfg.speaker_snr_db if cfg.speaker_snr_db is not None else float(rng.uniform(*cfg.speaker_snr_range_db))
    noise_snr = cfg.noise_snr_db if cfg.noise_snr_db is not None else float(rng.uniform(*cfg.noise_snr_range_db))

    # each speaker is active for A samples; the shared region is overlap * A
    A = int(np.floor(T / (2.0 - overlap)))
    start2 = T - A
    spans = [(0, A), (start2, T)]
    order = rng.permutation(2)  # which pitch band talks first
    sources = np.zeros((2, T))
    for i, (lo, hi) in enumerate(spans):
        spec = SynthSpeakerSpec(f0_range=SPEAKER_BANDS[order[i]], n_harmonics=cfg.n_harmonics)
        sources[i, lo:hi] = synth_speaker(spec, hi - lo, sr, rng)
    if cfg.reverb:
        for i in range(2):
            sources[i] = scipy.signal.lfilter(decaying_fir(sr, cfg.reverb_ms, rng), [1.0], sources[i])

    # relative level of speaker 1 over speaker 2 is spk_snr dB
    e1, e2 = _energy(sources[0]), _energy(sources[1])
    sources[1] *= np.sqrt(e1 / e2 * 10 ** (-spk_snr / 10))
    speech = sources[0] + sources[1]
    noise = synth_noise(T, sr, rng)
    noise *= np.sqrt(_energy(speech) / _energy(noise) * 10 ** (-noise_snr / 10))

    gain = cfg.level_rms / np.sqrt(_energy(speech + noise) / T)
    sources = (sources * gain).astype(np.float32)
    noise = (noise * gain).astype(np.float32)
    mixture = sources[0] + sources[1] + noise
    return MixtureExample(mixture, sources, noise, overlap, spk_snr, noise_snr, rng.seed, utt_id, spans)


# ---------------------------------------------------------------------------
# WAV


def wav_write(path, samples, rate: int, encoding: str = "float32") -> None:
    samples = np.asarray(samples)
    if samples.ndim != 1:
        raise WavError("only mono signals are supported")
    if encoding == "float32":
        data = samples.astype(np.float32)
    elif encoding == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise WavError(f"unsupported encoding {encoding!r}")
    scipy.io.wavfile.write(str(path), int(rate), data)


def wav_read(path) -> tuple[np.ndarray, int]:
    """Mono PCM-16 (scaled to [-1, 1)) or float-32 samples and the rate."""
    try:
        rate, data = scipy.io.wavfile.read(str(path))
    except (ValueError, EOFError, OSError, struct.error) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise WavError(f"{path}: cannot parse WAV ({exc})") from None
    if data.ndim != 1:
        raise WavError(f"{path}: {data.shape[1]} channels, only mono is supported")
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0, rate
    if data.dtype == np.float32:
        return data, rate
    raise WavError(f"{path}: unsupported sample format {data.dtype}")


# ---------------------------------------------------------------------------
# datasets

SPLIT_KEYS = {"train": 1, "val": 2, "test": 3}


def generate_split(cfg: MixtureConfig, n: int, seed: int, split: str) -> list[MixtureExample]:
    base = Rng(seed).spawn(SPLIT_KEYS[split])
    return [make_mixture(base.spawn(i), cfg, f"{split}_{i:05d}") for i in range(n)]


def build_dataset(cfg: MixtureConfig, n_train: int, n_val: int, n_test: int, seed: int, out_dir) -> Path:
    """Write WAVs plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for ex in generate_split(cfg, n, seed, split):
            d = out / split / ex.utt_id
            d.mkdir(parents=True, exist_ok=True)
            sr = cfg.sample_rate_hz
            wav_write(d / "mixture.wav", ex.mixture, sr)
            wav_write(d / "s1.wav", ex.sources[0], sr)
            wav_write(d / "s2.wav", ex.sources[1], sr)
            wav_write(d / "noise.wav", ex.noise, sr)
            rel = d.relative_to(out)
            records.append(
                {
                    "utt_id": ex.utt_id,
                    "split": split,
                    "mixture": str(rel / "mixture.wav"),
                    "sources": [str(rel / "s1.wav"), str(rel / "s2.wav")],
                    "noise": str(rel / "noise.wav"),
                    "sample_rate_hz": sr,
                    **ex.metadata(),
                }
            )
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "mixture_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    return manifest


def load_split(manifest, split: str) -> list[MixtureExample]:
    manifest = Path(manifest)
    root = manifest.parent
    items = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        if r["split"] != split:
            continue
        mix, _ = wav_read(root / r["mixture"])
        srcs = np.stack([wav_read(root / s)[0] for s in r["sources"]])
        noise, _ = wav_read(root / r["noise"])
        items.append(
            MixtureExample(
                mix, srcs, noise, r["overlap_ratio"], r["speaker_snr_db"], r["noise_snr_db"], r["seed"], r["utt_id"],
                [tuple(a) for a in r.get("active", [])],
            )
        )
    return items
