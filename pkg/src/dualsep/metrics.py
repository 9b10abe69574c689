"""SI-SDR / SDR and their improvements over the unprocessed mixture."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .training import pit_from_matrix

CLAMP_DB = 60.0


def _clamp(db: float) -> float:
    return float(np.clip(db, -CLAMP_DB, CLAMP_DB))


def _ratio_db(num: float, den: float) -> float:
    if den <= 0:
        return CLAMP_DB if num > 0 else -CLAMP_DB
    if num <= 0:
        return -CLAMP_DB
    return 10.0 * np.log10(num / den)


def si_sdr(est, ref, clamp: bool = True) -> float:
    """Scale-invariant SDR in dB; both signals are made zero-mean first."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("reference signal is zero")
    target = np.dot(est, ref) / ref_energy * ref
    noise = est - target
    db = _ratio_db(np.dot(target, target), np.dot(noise, noise))
    return _clamp(db) if clamp else db


def sdr(est, ref, clamp: bool = True) -> float:
    """Plain energy-ratio SDR (an SNR; no distortion filter) in dB."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("reference signal is zero")
    err = ref - est
    db = _ratio_db(ref_energy, np.dot(err, err))
    return _clamp(db) if clamp else db


def best_permutation(ests, refs, metric=si_sdr) -> tuple[tuple[int, ...], np.ndarray]:
    """Assignment maximizing the mean ``metric``; also returns the score matrix."""
    n = len(ests)
    scores = np.array([[metric(ests[i], refs[j]) for j in range(n)] for i in range(n)])
    _, perm = pit_from_matrix(-scores)
    return perm, scores


@dataclass
class UtteranceScore:
    utt_id: str
    permutation: tuple[int, ...]
    si_sdr: list[float]
    si_sdri: list[float]
    sdr: list[float]
    sdri: list[float]


@dataclass
class EvalReport:
    path: str
    utterances: list[UtteranceScore] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.utterances)

    def _mean(self, key: str) -> float:
        return float(np.mean([np.mean(getattr(u, key)) for u in self.utterances]))

    @property
    def mean_si_sdr(self) -> float:
        return self._mean("si_sdr")

    @property
    def mean_si_sdri(self) -> float:
        return self._mean("si_sdri")

    @property
    def mean_sdr(self) -> float:
        return self._mean("sdr")

    @property
    def mean_sdri(self) -> float:
        return self._mean("sdri")

    def summary(self) -> dict:
        return {
            "path": self.path,
            "count": self.count,
            "si_sdr": self.mean_si_sdr,
            "si_sdri": self.mean_si_sdri,
            "snr_sdr": self.mean_sdr,
            "snr_sdri": self.mean_sdri,
        }

    def summary_line(self) -> str:
        s = self.summary()
        return (
            f"[{s['path']}] {s['count']} utterances  SI-SDRi {s['si_sdri']:.2f} dB  "
            f"SNR-SDRi {s['snr_sdri']:.2f} dB  (SI-SDR {s['si_sdr']:.2f} dB)"
        )

    def write(self, path) -> Path:
        """One JSON record per utterance, then a summary record."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for u in self.utterances:
                fh.write(json.dumps({"type": "utterance", **asdict(u)}) + "\n")
            fh.write(json.dumps({"type": "summary", **self.summary()}) + "\n")
        return path


def score_utterance(ests, refs, mixture, utt_id: str = "") -> UtteranceScore:
    ests = np.asarray(ests, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    perm, _ = best_permutation(ests, refs)
    inverse = np.argsort(perm)  # reference j is matched by estimate inverse[j]
    si, si_i, sd, sd_i = [], [], [], []
    for j, ref in enumerate(refs):
        est = ests[inverse[j]]
        base_si = si_sdr(mixture, ref)
        base_sd = sdr(mixture, ref)
        si.append(si_sdr(est, ref))
        sd.append(sdr(est, ref))
        si_i.append(si[-1] - base_si)
        sd_i.append(sd[-1] - base_sd)
    return UtteranceScore(utt_id, perm, si, si_i, sd, sd_i)


def evaluate(model, dataset, path) -> EvalReport:
    """Best-permutation metrics of ``model`` on every item of ``dataset``.

    Items need ``mixture`` and ``sources``; ``utt_id`` is used when present.
    """
    if not len(dataset):
        raise ValueError("cannot evaluate on an empty dataset")
    report = EvalReport(getattr(path, "value", str(path)))
    for k, item in enumerate(dataset):
        ests = model(item.mixture, path).data
        report.utterances.append(
            score_utterance(ests, item.sources, item.mixture, getattr(item, "utt_id", None) or str(k))
        )
    return report
