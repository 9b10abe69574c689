import json

import numpy as np
import pytest
import scipy.stats

from dualsep.datagen import (
    SPEAKER_BANDS,
    MixtureConfig,
    SynthSpeakerSpec,
    WavError,
    build_dataset,
    generate_split,
    load_split,
    make_mixture,
    synth_speaker,
    wav_read,
    wav_write,
)
from dualsep.numcore import Rng

SHORT = MixtureConfig(duration_s=0.5)


def energy(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x))


def test_zero_harmonics_is_silence():
    out = synth_speaker(SynthSpeakerSpec(n_harmonics=0), 800, 8000, Rng(0))
    assert np.array_equal(out, np.zeros(800))


def test_single_harmonic_constant_envelope_peak():
    spec = SynthSpeakerSpec(f0_range=(125.0, 125.0), n_harmonics=1, envelope_rate_hz=0, vibrato_depth=0.0)
    x = synth_speaker(spec, 8000, 8000, Rng(0))
    spectrum = np.abs(np.fft.rfft(x))
    assert np.argmax(spectrum) == 125  # 1 Hz bins over one second
    assert abs(np.sqrt(np.mean(x**2)) - 1.0) < 1e-12


def test_speaker_determinism():
    spec = SynthSpeakerSpec()
    a = synth_speaker(spec, 1000, 8000, Rng(3))
    b = synth_speaker(spec, 1000, 8000, Rng(3))
    assert np.array_equal(a, b) and not np.array_equal(a, synth_speaker(spec, 1000, 8000, Rng(4)))


def test_speaker_bad_duration():
    with pytest.raises(ValueError):
        synth_speaker(SynthSpeakerSpec(), 0, 8000, Rng(0))


def test_bands_disjoint():
    (lo1, hi1), (lo2, hi2) = SPEAKER_BANDS
    assert hi1 < lo2


def test_overlap_zero_disjoint_supports():
    ex = make_mixture(Rng(1), MixtureConfig(duration_s=1.0, overlap=0.0))
    on = [np.flatnonzero(s) for s in ex.sources]
    assert on[0].max() < on[1].min() + 1


@pytest.mark.parametrize("r", [0.0, 0.3, 1.0])
def test_overlap_region(r):
    T = 8000
    ex = make_mixture(Rng(2), MixtureConfig(duration_s=1.0, overlap=r))
    (a0, a1), (b0, b1) = ex.active
    A = int(np.floor(T / (2 - r)))
    assert a0 == 0 and b1 == T and a1 - a0 == A == b1 - b0
    shared = max(0, a1 - b0)
    assert abs(shared - r * A) <= 1 + r * A * 1e-9 + 1


def test_speaker_snr_zero_equal_energy():
    ex = make_mixture(Rng(3), MixtureConfig(duration_s=1.0, speaker_snr_db=0.0))
    e1, e2 = energy(ex.sources[0]), energy(ex.sources[1])
    assert abs(e1 - e2) / e1 < 1e-6


def test_speaker_snr_with_reverb():
    ex = make_mixture(Rng(3), MixtureConfig(duration_s=1.0, speaker_snr_db=3.0, reverb=True))
    assert abs(10 * np.log10(energy(ex.sources[0]) / energy(ex.sources[1])) - 3.0) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_noise_snr_within_tenth_db(seed):
    ex = make_mixture(Rng(seed), SHORT)
    measured = 10 * np.log10(energy(ex.sources[0] + ex.sources[1]) / energy(ex.noise))
    assert abs(measured - ex.noise_snr_db) < 0.1


def test_mixture_is_exact_sum():
    ex = make_mixture(Rng(7), MixtureConfig(duration_s=1.0, reverb=True))
    assert ex.mixture.dtype == np.float32
    assert np.array_equal(ex.mixture, ex.sources[0] + ex.sources[1] + ex.noise)
    assert ex.mixture.shape == ex.noise.shape == ex.sources[0].shape == (8000,)


def test_sampled_parameters_in_intervals():
    for ex in generate_split(MixtureConfig(duration_s=0.05), 200, 1, "train"):
        assert 0 <= ex.overlap_ratio <= 1
        assert 0 <= ex.speaker_snr_db <= 5
        assert 10 <= ex.noise_snr_db <= 20


def test_overlap_uniform_chi_square():
    draws = [ex.overlap_ratio for ex in generate_split(MixtureConfig(duration_s=0.02), 1000, 5, "train")]
    counts, _ = np.histogram(draws, bins=10, range=(0, 1))
    assert scipy.stats.chisquare(counts).pvalue > 1e-3


def test_splits_use_distinct_seeds():
    a = generate_split(SHORT, 2, 0, "train")
    b = generate_split(SHORT, 2, 0, "val")
    assert not np.array_equal(a[0].mixture, b[0].mixture)


# WAV -------------------------------------------------------------------------


def test_wav_float32_bit_exact(tmp_path, rng):
    x = rng.normal(1000).astype(np.float32)
    wav_write(tmp_path / "a.wav", x, 8000)
    y, rate = wav_read(tmp_path / "a.wav")
    assert rate == 8000 and y.dtype == np.float32 and np.array_equal(x, y)


def test_wav_pcm16_quantization(tmp_path, rng):
    x = rng.uniform(-0.99, 0.99, 1000)
    wav_write(tmp_path / "a.wav", x, 16000, encoding="pcm16")
    y, rate = wav_read(tmp_path / "a.wav")
    assert rate == 16000 and np.abs(y - x).max() <= 1 / 32768


def test_wav_truncated(tmp_path, rng):
    wav_write(tmp_path / "a.wav", rng.normal(100), 8000)
    raw = (tmp_path / "a.wav").read_bytes()
    (tmp_path / "b.wav").write_bytes(raw[:30])
    with pytest.raises(WavError):
        wav_read(tmp_path / "b.wav")


def test_wav_not_riff(tmp_path):
    (tmp_path / "c.wav").write_bytes(b"hello, this is not audio at all" * 4)
    with pytest.raises(WavError):
        wav_read(tmp_path / "c.wav")


def test_wav_multichannel(tmp_path, rng):
    import scipy.io.wavfile

    scipy.io.wavfile.write(tmp_path / "s.wav", 8000, rng.normal((100, 2)).astype(np.float32))
    with pytest.raises(WavError):
        wav_read(tmp_path / "s.wav")
    with pytest.raises(WavError):
        wav_write(tmp_path / "t.wav", rng.normal((100, 2)), 8000)


def test_wav_unsupported_encoding(tmp_path, rng):
    import scipy.io.wavfile

    scipy.io.wavfile.write(tmp_path / "i.wav", 8000, (rng.normal(100) * 1000).astype(np.int32))
    with pytest.raises(WavError):
        wav_read(tmp_path / "i.wav")
    with pytest.raises(WavError):
        wav_write(tmp_path / "j.wav", rng.normal(10), 8000, encoding="mulaw")


# datasets ----------------------------------------------------------------------


def test_build_dataset(tmp_path):
    manifest = build_dataset(SHORT, 2, 1, 1, 0, tmp_path)
    recs = [json.loads(x) for x in manifest.read_text().splitlines()]
    assert [r["split"] for r in recs] == ["train", "train", "val", "test"]
    for r in recs[:2]:
        d = tmp_path / r["mixture"]
        assert d.parent.is_dir() and sorted(p.name for p in d.parent.iterdir()) == [
            "mixture.wav", "noise.wav", "s1.wav", "s2.wav"
        ]
        assert 0 <= r["overlap_ratio"] <= 1 and "seed" in r
    items = load_split(manifest, "train")
    direct = generate_split(SHORT, 2, 0, "train")
    assert np.array_equal(items[1].mixture, direct[1].mixture)
    assert np.array_equal(items[1].mixture, items[1].sources[0] + items[1].sources[1] + items[1].noise)
    assert (tmp_path / "mixture_config.json").is_file()


def test_build_dataset_deterministic(tmp_path):
    build_dataset(SHORT, 2, 0, 0, 9, tmp_path / "a")
    build_dataset(SHORT, 2, 0, 0, 9, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 10
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
