import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualsep.datagen import MixtureConfig, generate_split
from dualsep.dualpath import PathError, PathSelector
from dualsep.metrics import si_sdr
from dualsep.models import build_model
from dualsep.numcore import Rng, Tensor, backward, grad_check, scale
from dualsep.training import (
    EarlyStopping,
    OptimizerState,
    PlateauDecay,
    Strategy,
    TrainConfig,
    adam_step,
    batch_pit_loss,
    clip_gradients,
    global_grad_norm,
    make_batch,
    multitask_step,
    neg_snr_loss,
    path_losses,
    pit_from_matrix,
    pit_loss,
    train_loop,
)


def brute_force(m):
    n = len(m)
    return min(sum(m[i][p[i]] for i in range(n)) / n for p in itertools.permutations(range(n)))


# loss ----------------------------------------------------------------------


def test_neg_snr_perfect_estimate(rng):
    ref = rng.normal(100)
    unit = ref / np.linalg.norm(ref)
    assert abs(neg_snr_loss(unit, unit).item() + 80.0) < 1e-6
    # the floor scales with reference energy: -10 log10(E / eps + eps)
    energy = np.dot(ref, ref)
    assert abs(neg_snr_loss(ref, ref).item() + 10 * math.log10(energy / 1e-8 + 1e-8)) < 1e-9


def test_neg_snr_zero_estimate(rng):
    ref = rng.normal(100)
    assert abs(neg_snr_loss(np.zeros(100), ref).item()) < 1e-6


def test_neg_snr_ten_percent_noise(rng):
    ref = rng.normal(500)
    noise = rng.normal(500)
    noise *= math.sqrt(0.1 * np.dot(ref, ref) / np.dot(noise, noise))
    assert abs(neg_snr_loss(ref + noise, ref).item() + 10.0) < 1e-3


def test_neg_snr_errors(rng):
    with pytest.raises(ValueError):
        neg_snr_loss(rng.normal(10), np.zeros(10))
    with pytest.raises(ValueError):
        neg_snr_loss(rng.normal(10), rng.normal(11))


def test_neg_snr_gradient(rng):
    ref = rng.normal(30)
    est = Tensor(ref + rng.normal(30))
    assert grad_check(lambda t: neg_snr_loss(t, ref), est).passed


def test_loss_not_scale_invariant_but_metric_is(rng):
    ref = rng.normal(400)
    est = ref + 0.3 * rng.normal(400)
    assert abs(neg_snr_loss(3 * est, ref).item() - neg_snr_loss(est, ref).item()) > 1.0
    assert abs(si_sdr(3 * est, ref) - si_sdr(est, ref)) < 1e-9


# PIT -----------------------------------------------------------------------


def test_pit_matrix_example():
    value, perm = pit_from_matrix([[1, 5], [5, 1]])
    assert value == 1 and perm == (0, 1)
    value, perm = pit_from_matrix([[5, 1], [1, 5]])
    assert value == 1 and perm == (1, 0)


@given(st.integers(2, 4), st.integers(0, 100_000))
@settings(max_examples=200, deadline=None)
def test_pit_matches_brute_force(n, seed):
    m = np.random.default_rng(seed).standard_normal((n, n))
    value, perm = pit_from_matrix(m)
    assert value == brute_force(m)
    assert sorted(perm) == list(range(n))
    assert sum(m[i, perm[i]] for i in range(n)) / n == value


def test_pit_minimal_over_fixed_assignments(rng):
    m = rng.normal((3, 3))
    value, _ = pit_from_matrix(m)
    for p in itertools.permutations(range(3)):
        assert value <= sum(m[i, p[i]] for i in range(3)) / 3


def test_pit_rejects_non_square():
    with pytest.raises(ValueError):
        pit_from_matrix(np.zeros((2, 3)))


def test_pit_loss_swapped_references(rng):
    refs = rng.normal((2, 200))
    ests = refs + 0.1 * rng.normal((2, 200))
    v1, p1 = pit_loss(ests, refs)
    v2, p2 = pit_loss(ests, refs[::-1].copy())
    assert abs(v1.item() - v2.item()) < 1e-12 and p1 == (0, 1) and p2 == (1, 0)


def test_pit_loss_three_sources_brute_force(rng):
    refs = rng.normal((3, 100))
    ests = rng.normal((3, 100))
    m = [[neg_snr_loss(ests[i], refs[j]).item() for j in range(3)] for i in range(3)]
    value, _ = pit_loss(ests, refs)
    assert abs(value.item() - brute_force(m)) < 1e-12


def test_pit_count_mismatch(rng):
    with pytest.raises(ValueError):
        pit_loss(rng.normal((2, 10)), rng.normal((3, 10)))


def test_pit_loss_gradient(rng):
    refs = rng.normal((2, 20))
    ests = Tensor(refs[::-1] + 0.5 * rng.normal((2, 20)))
    assert grad_check(lambda t: pit_loss(t, refs)[0], ests).passed


def test_batch_mask_ignores_padding(rng):
    refs = rng.normal((1, 2, 50))
    ests = refs + 0.2 * rng.normal((1, 2, 50))
    mask = np.ones((1, 50))
    mask[0, 40:] = 0
    refs_p = refs.copy()
    refs_p[..., 40:] = 0
    ests_p = ests.copy()
    ests_p[..., 40:] = 123.0
    masked, _ = batch_pit_loss(ests_p, refs_p, mask)
    direct, _ = pit_loss(ests[0, :, :40], refs[0, :, :40])
    assert abs(masked.item() - direct.item()) < 1e-12


# clipping and Adam -----------------------------------------------------------


def with_grads(*grads):
    ts = []
    for g in grads:
        t = Tensor(np.zeros_like(g), requires_grad=True)
        t.grad = np.array(g, dtype=np.float64)
        ts.append(t)
    return ts


def test_clip_scales_ten_to_five():
    ps = with_grads(np.array([6.0, 8.0]))
    assert clip_gradients(ps, 5.0) == 0.5
    assert abs(global_grad_norm(ps) - 5.0) < 1e-12


def test_clip_leaves_small_norm():
    ps = with_grads(np.array([3.0, 0.0]))
    assert clip_gradients(ps, 5.0) == 1.0 and np.array_equal(ps[0].grad, [3.0, 0.0])


@given(st.integers(1, 6), st.floats(0.01, 1e4), st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_clip_bound_many_tensors(n, magnitude, seed):
    gen = np.random.default_rng(seed)
    grads = [gen.standard_normal(gen.integers(1, 20)).astype(np.float32) * magnitude for _ in range(n)]
    ps = [Tensor(np.zeros_like(g), requires_grad=True) for g in grads]
    for p, g in zip(ps, grads):
        p.grad = g.copy()
    clip_gradients(ps, 5.0)
    assert global_grad_norm(ps) <= 5.0 + 1e-6
    for p, g in zip(ps, grads):
        assert (np.abs(p.grad) <= np.abs(g)).all()


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_first_step():
    p = Tensor(np.array([0.5]), requires_grad=True)
    state = OptimizerState.for_params([p])
    p.grad = np.array([40.0])
    adam_step(state, [p], 1e-3)
    assert abs(p.data[0] - scalar_adam(0.5, [40.0], 1e-3)) < 1e-15
    assert abs(p.data[0] - (0.5 - 1e-3)) < 1e-9
    assert state.step == 1


def test_adam_two_steps():
    p = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    state = OptimizerState.for_params([p])
    grads = [np.array([0.3, -2.0]), np.array([0.1, 1.0])]
    for g in grads:
        p.grad = g
        adam_step(state, [p], 0.01)
    for i in range(2):
        assert abs(p.data[i] - scalar_adam([0.5, -1.0][i], [g[i] for g in grads], 0.01)) < 1e-14


def test_adam_zero_grad():
    p = Tensor(np.array([0.5, 2.0]), requires_grad=True)
    state = OptimizerState.for_params([p])
    p.grad = np.zeros(2)
    adam_step(state, [p], 0.1)
    assert np.array_equal(p.data, [0.5, 2.0])


# schedules -------------------------------------------------------------------


def test_plateau_decay():
    d = PlateauDecay(1e-3, 0.5, 3)
    assert d.update(1.0) == 1e-3
    assert d.update(1.0) == 1e-3 and d.update(1.2) == 1e-3  # 2 stale
    assert d.update(1.1) == 5e-4  # 3 stale
    assert d.update(1.1) == 5e-4 and d.update(1.1) == 5e-4
    assert d.update(1.1) == 2.5e-4
    assert d.update(0.5) == 2.5e-4


def test_early_stopping_exact():
    s = EarlyStopping(15)
    assert not s.update(1.0, 0)
    fired = [s.update(1.0 + e, e) for e in range(1, 16)]
    assert fired == [False] * 14 + [True]
    assert s.best_epoch == 0


def test_early_stopping_resets_on_improvement():
    s = EarlyStopping(3)
    s.update(1.0, 0)
    s.update(2.0, 1)
    s.update(2.0, 2)
    assert not s.update(0.5, 3)
    assert [s.update(1.0, e) for e in (4, 5, 6)] == [False, False, True]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(strategy="distill")
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=1.5)
    assert TrainConfig(strategy="multitask").path_weights() == {PathSelector.OFFLINE: 1.0, PathSelector.ONLINE: 1.0}
    assert Strategy("init_from_offline").paths == (PathSelector.ONLINE,)


# multitask -------------------------------------------------------------------


def tiny_items(n=2, duration=0.25, seed=0):
    return generate_split(MixtureConfig(duration_s=duration), n, seed, "train")


@pytest.fixture(scope="module")
def toy_batch():
    return make_batch(tiny_items(), np.float64)


def grads_of(model, fn):
    model.zero_grad()
    fn()
    return {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in model.named_parameters()}


def single_path(model, batch, path, w=1.0):
    loss = path_losses(model, batch, (path,))[path]
    backward(scale(loss, w))


@pytest.mark.parametrize("kind", ["fd", "td"])
@pytest.mark.parametrize("scheme", ["decomposed", "reorganized"])
def test_multitask_gradient_is_sum_of_paths(kind, scheme, toy_batch):
    cfg = {"fd": dict(n_layers=1, hidden=4), "td": dict(n_blocks=1, hidden=4, n_kernels=8, chunk=10)}[kind]
    m = build_model(kind, {**cfg, "scheme": scheme}, seed=0, dtype=np.float64)
    both = grads_of(m, lambda: multitask_step(m, toy_batch, (1.0, 1.0)))
    off = grads_of(m, lambda: single_path(m, toy_batch, "offline"))
    on = grads_of(m, lambda: single_path(m, toy_batch, "online"))
    for k in both:
        ref = off[k] + on[k]
        assert np.abs(both[k] - ref).max() <= 1e-6 * max(np.abs(ref).max(), 1e-12)
    assert np.abs(on["blocks.0.rnn1.W" if kind == "fd" else "blocks.0.inter.rnn1.W"]).max() > 0


def test_multitask_zero_online_weight(toy_batch):
    m = build_model("fd", dict(n_layers=1, hidden=4), seed=0, dtype=np.float64)
    mt = grads_of(m, lambda: multitask_step(m, toy_batch, (1.0, 0.0)))
    off = grads_of(m, lambda: single_path(m, toy_batch, "offline"))
    for k in mt:
        assert np.array_equal(mt[k], off[k])


def test_multitask_rejects_standard(toy_batch):
    m = build_model("fd", dict(n_layers=1, hidden=4, scheme="standard"), seed=0, dtype=np.float64)
    with pytest.raises(PathError):
        multitask_step(m, toy_batch)


# train loop ------------------------------------------------------------------


def run(seed=0, **kw):
    items = tiny_items(2)
    m = build_model("fd", dict(n_layers=1, hidden=4), seed=0)
    cfg = TrainConfig(max_epochs=3, batch_size=2, seed=seed, **kw)
    return m, train_loop(m, items, items, cfg)


def test_train_loop_deterministic():
    _, (_, h1) = run()
    _, (_, h2) = run()
    strip = lambda h: [{k: v for k, v in r.items() if k != "seconds"} for r in h.records]  # noqa: E731
    assert strip(h1) == strip(h2)


def test_train_loop_history_and_log(tmp_path):
    items = tiny_items(2)
    m = build_model("fd", dict(n_layers=1, hidden=4), seed=0)
    cfg = TrainConfig(max_epochs=2, batch_size=2, strategy="multitask")
    best, hist = train_loop(m, items, items, cfg, log_path=tmp_path / "log.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2] == hist.column("epoch")
    for key in ("train_loss", "val_loss", "lr", "train_loss_offline", "train_loss_online", "val_loss_online"):
        assert key in lines[-1]
    assert lines[0]["step"] == 0 and lines[-1]["step"] == 2
    assert best.metadata["best_epoch"] in (0, 1, 2)


def test_train_loop_improves():
    _, (best, hist) = run(lr0=1e-2)
    assert min(hist.column("train_loss")[1:]) < hist.column("train_loss")[0]


def test_train_loop_max_steps():
    _, (_, hist) = run(max_steps=2)
    assert hist.records[-1]["step"] == 2


def test_train_loop_wrong_path():
    items = tiny_items(1)
    m = build_model("fd", dict(n_layers=1, hidden=4, scheme="standard"), seed=0)
    with pytest.raises(PathError):
        train_loop(m, items, items, TrainConfig(strategy="from_scratch_online"))
    with pytest.raises(ValueError):
        train_loop(m, [], items, TrainConfig())


def test_train_loop_lr_schedule_replays_train_losses():
    items = tiny_items(2)
    m = build_model("fd", dict(n_layers=1, hidden=4), seed=0)
    cfg = TrainConfig(max_epochs=8, batch_size=2, lr0=0.5, decay_patience_epochs=1)  # large LR forces stalls
    _, hist = train_loop(m, items, items, cfg)
    replay = PlateauDecay(0.5, 0.5, 1)
    for rec in hist.records[1:]:
        assert rec["lr"] == replay.lr
        assert rec["next_lr"] == replay.update(rec["train_loss"])
