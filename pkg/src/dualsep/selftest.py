"""Fast built-in correctness checks run by ``dualsep selftest``."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .codec import StftConfig, istft_synthesize, stft_analyze
from .dualpath import DualBlockParams, chunk_merge, chunk_split, dual_block_forward, stack_forward
from .layers import LstmParams, NormParams, cln_forward, gln_forward, lstm_scan
from .numcore import Rng, Tensor, grad_check, inject_fault, mul, sigmoid, sum_
from .training import pit_from_matrix


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _weighted_sum(y: Tensor, seed: int = 99) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return sum_(mul(y, w))


def check_grad_sigmoid():
    x = Tensor(Rng(1).normal(4))
    r = grad_check(lambda t: sum_(sigmoid(t)), x, 1e-5, 1e-4)
    return r.passed, f"max rel err {r.max_rel_err:.2e}"


def check_grad_lstm():
    rng = Rng(2)
    p = LstmParams.init(3, 4, rng)
    x = Tensor(rng.normal((2, 6, 3)))
    r = grad_check(lambda ts: _weighted_sum(lstm_scan(p, ts[0])), [x, p.W, p.U, p.b], 1e-5, 1e-4)
    return r.passed, f"max rel err {r.max_rel_err:.2e}"


def check_grad_cln():
    rng = Rng(3)
    p = NormParams(Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.normal(3)))
    x = Tensor(rng.normal((5, 3)))
    r = grad_check(lambda ts: _weighted_sum(cln_forward(p, ts[0])), [x, p.gamma, p.beta], 1e-5, 1e-4)
    return r.passed, f"max rel err {r.max_rel_err:.2e}"


def check_norm_equivalence():
    rng = Rng(4)
    p = NormParams.init(4)
    x = rng.normal((9, 4))
    c = cln_forward(p, Tensor(x)).data
    g = gln_forward(p, Tensor(x)).data
    x2 = x.copy()
    x2[5:] += rng.normal((4, 4))
    c2 = cln_forward(p, Tensor(x2)).data
    last = np.abs(c[-1] - g[-1]).max()
    causal = np.abs(c[:5] - c2[:5]).max()
    return last < 1e-6 and causal < 1e-7, f"last-frame diff {last:.1e}, past diff {causal:.1e}"


def check_path_equivalence():
    rng = Rng(5)
    worst = 0.0
    for scheme in ("decomposed", "reorganized"):
        blk = DualBlockParams.init(4, 3, scheme, rng)
        std = DualBlockParams("standard", blk.rnn1, blk.rnn2, blk.fc_offline, blk.norm)
        x = rng.normal((7, 4))
        diff = np.abs(dual_block_forward(blk, x, "offline").data - dual_block_forward(std, x, "offline").data).max()
        worst = max(worst, diff)
    return worst < 1e-6, f"max diff {worst:.1e}"


def check_online_causality():
    rng = Rng(6)
    worst = 0.0
    for scheme in ("decomposed", "reorganized"):
        blocks = [DualBlockParams.init(4, 3, scheme, rng) for _ in range(3)]
        x = rng.normal((12, 4))
        y = stack_forward(blocks, x, "online").data
        x2 = x.copy()
        x2[8:] = rng.normal((4, 4))
        y2 = stack_forward(blocks, x2, "online").data
        worst = max(worst, np.abs(y[:8] - y2[:8]).max())
    return worst < 1e-7, f"max past diff {worst:.1e}"


def check_pit():
    gen = np.random.default_rng(7)
    for n in (2, 3):
        for _ in range(200):
            m = gen.standard_normal((n, n))
            brute = min(sum(m[i, p[i]] for i in range(n)) / n for p in itertools.permutations(range(n)))
            if pit_from_matrix(m)[0] != brute:
                return False, f"mismatch for n={n}"
    return True, "400 matrices"


def check_codec_roundtrips():
    cfg = StftConfig(8000)
    x = Rng(8).normal(2000)
    mag, phase = stft_analyze(cfg, x)
    y = istft_synthesize(cfg, mag, phase).data
    w = cfg.win_length
    stft_err = np.abs(y[w : len(y) - w] - x[w : len(y) - w]).max()
    f = Rng(9).normal((150, 5))
    chunk_err = np.abs(chunk_merge(chunk_split(f, 100, 50)).data - f).max()
    return stft_err < 1e-6 and chunk_err < 1e-6, f"stft {stft_err:.1e}, chunk {chunk_err:.1e}"


CHECKS = {
    "grad_check sigmoid": check_grad_sigmoid,
    "grad_check lstm": check_grad_lstm,
    "grad_check cln": check_grad_cln,
    "cln/gln equivalence and causality": check_norm_equivalence,
    "offline path equivalence": check_path_equivalence,
    "online path causality": check_online_causality,
    "pit brute force": check_pit,
    "codec round-trips": check_codec_roundtrips,
}


def run_selftest(inject: str | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            if inject:
                with inject_fault(inject):
                    passed, detail = fn()
            else:
                passed, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results
