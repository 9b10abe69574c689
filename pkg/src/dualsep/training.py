"""Negative-SNR objective with PIT, Adam, schedules and the training loop."""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dualpath import PathError, PathSelector, Scheme
from .models import Checkpoint, SeparationModel
from .numcore import NumericalError, Rng, Tensor, add, as_tensor, backward, div, log10, mean, mul, scale, slice_, sub, sum_

log = logging.getLogger(__name__)

SNR_EPS = 1e-8


class Strategy(enum.Enum):
    FROM_SCRATCH_ONLINE = "from_scratch_online"
    FROM_SCRATCH_OFFLINE = "from_scratch_offline"
    INIT_FROM_OFFLINE = "init_from_offline"
    MULTITASK = "multitask"
    INIT_PLUS_MULTITASK = "init_plus_multitask"

    @property
    def paths(self) -> tuple[PathSelector, ...]:
        if self in (Strategy.MULTITASK, Strategy.INIT_PLUS_MULTITASK):
            return (PathSelector.OFFLINE, PathSelector.ONLINE)
        if self is Strategy.FROM_SCRATCH_OFFLINE:
            return (PathSelector.OFFLINE,)
        return (PathSelector.ONLINE,)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.5
    decay_patience_epochs: int = 3
    early_stop_patience: int = 15
    clip_norm: float = 5.0
    batch_size: int = 4
    max_epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    strategy: str = "from_scratch_offline"
    w_offline: float = 1.0
    w_online: float = 1.0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy).value
        if self.lr0 <= 0 or not 0 < self.lr_decay < 1:
            raise ValueError("need lr0 > 0 and 0 < lr_decay < 1")
        if self.decay_patience_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.w_offline < 0 or self.w_online < 0:
            raise ValueError("multitask weights must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def path_weights(self) -> dict[PathSelector, float]:
        paths = Strategy(self.strategy).paths
        if len(paths) == 1:
            return {paths[0]: 1.0}
        return {PathSelector.OFFLINE: self.w_offline, PathSelector.ONLINE: self.w_online}


class TrainingDiverged(NumericalError):
    pass


# ---------------------------------------------------------------------------
# objective


def neg_snr_loss(est, ref) -> Tensor:
    """-10 log10(|ref|^2 / (|ref - est|^2 + eps) + eps) over the last axis.

    Leading axes broadcast, so ``est[:, None]`` against ``ref[None]`` gives a
    full pairwise loss matrix.
    """
    est = as_tensor(est)
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=est.dtype)
    if ref.shape[-1] != est.shape[-1]:
        raise ValueError(f"length mismatch: estimate {est.shape[-1]}, reference {ref.shape[-1]}")
    energy = np.sum(ref * ref, axis=-1)
    if np.any(energy == 0):
        raise ValueError("reference signal is all zeros")
    err = sub(ref, est)
    err_energy = sum_(mul(err, err), axis=-1)
    ratio = div(energy, add(err_energy, SNR_EPS))
    return scale(log10(add(ratio, SNR_EPS)), -10.0)


def pit_from_matrix(losses) -> tuple[float, tuple[int, ...]]:
    """Best assignment of a square loss matrix (row = estimate, column = reference).

    Returns the mean loss of the assignment and ``perm`` with estimate ``i``
    matched to reference ``perm[i]``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2 or losses.shape[0] != losses.shape[1]:
        raise ValueError(f"need a square loss matrix, got shape {losses.shape}")
    rows, cols = linear_sum_assignment(losses)
    perm = tuple(int(c) for c in cols[np.argsort(rows)])
    n = len(perm)
    return sum(losses[i, perm[i]] for i in range(n)) / n, perm


def pit_loss(ests, refs, base_loss=neg_snr_loss) -> tuple[Tensor, tuple[int, ...]]:
    """Permutation-invariant loss for one utterance: ests, refs are (S, T)."""
    ests = as_tensor(ests)
    refs = np.asarray(refs)
    if ests.shape[0] != refs.shape[0]:
        raise ValueError(f"{ests.shape[0]} estimates but {refs.shape[0]} references")
    n = ests.shape[0]
    pair = base_loss(slice_(ests, (slice(None), None)), refs[None, :, :])
    _, perm = pit_from_matrix(pair.data)
    chosen = slice_(pair, (np.arange(n), np.array(perm)))
    return mean(chosen), perm


def batch_pit_loss(ests, refs, mask=None) -> tuple[Tensor, list[tuple[int, ...]]]:
    """Mean PIT loss over a batch: ests (B, S, T), refs (B, S, T), mask (B, T).

    Padding beyond each utterance is masked out of the estimate so that it
    contributes nothing to either energy term.
    """
    ests = as_tensor(ests)
    if mask is not None:
        ests = mul(ests, np.asarray(mask, dtype=ests.dtype)[:, None, :])
    losses, perms = [], []
    for b in range(ests.shape[0]):
        loss, perm = pit_loss(slice_(ests, b), refs[b])
        losses.append(loss)
        perms.append(perm)
    total = losses[0]
    for loss in losses[1:]:
        total = add(total, loss)
    return scale(total, 1.0 / len(losses)), perms


# ---------------------------------------------------------------------------
# optimization


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)))


def clip_gradients(params: Sequence[Tensor], max_norm: float = 5.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the scale applied (1.0 when nothing was clipped).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * p.grad.dtype.type(factor)
    return factor


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(state: OptimizerState, params: Sequence[Tensor], lr: float) -> None:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - update.astype(p.dtype)


class PlateauDecay:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a new best."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.stale = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


class EarlyStopping:
    """Signals a stop once ``patience`` consecutive epochs bring no new best."""

    def __init__(self, patience: int = 15):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, loss: float, epoch: int) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.stale = loss, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience


# ---------------------------------------------------------------------------
# batching and steps


@dataclass
class Batch:
    mixture: np.ndarray  # (B, T)
    sources: np.ndarray  # (B, S, T)
    mask: np.ndarray  # (B, T)


def make_batch(items, dtype=np.float32) -> Batch:
    """Zero-pad utterances to the longest one."""
    T = max(len(it.mixture) for it in items)
    S = len(items[0].sources)
    mix = np.zeros((len(items), T), dtype)
    src = np.zeros((len(items), S, T), dtype)
    mask = np.zeros((len(items), T), dtype)
    for b, it in enumerate(items):
        n = len(it.mixture)
        mix[b, :n] = it.mixture
        src[b, :, :n] = np.asarray(it.sources)
        mask[b, :n] = 1.0
    return Batch(mix, src, mask)


def path_losses(model: SeparationModel, batch: Batch, paths) -> dict[PathSelector, Tensor]:
    return {p: batch_pit_loss(model(batch.mixture, p), batch.sources, batch.mask)[0] for p in paths}


def multitask_step(model: SeparationModel, batch: Batch, weights=(1.0, 1.0)) -> tuple[float, float]:
    """Weighted offline + online PIT loss, one backward pass through both paths.

    Gradients accumulate into the model parameters; no optimizer step.
    """
    if model.scheme is Scheme.STANDARD:
        raise PathError("multitask training needs a decomposed or reorganized model")
    w_off, w_on = weights
    losses = path_losses(model, batch, (PathSelector.OFFLINE, PathSelector.ONLINE))
    total = add(scale(losses[PathSelector.OFFLINE], w_off), scale(losses[PathSelector.ONLINE], w_on))
    backward(total)
    return losses[PathSelector.OFFLINE].item(), losses[PathSelector.ONLINE].item()


def _weighted_step(model, batch, weights: dict[PathSelector, float]) -> dict[str, float]:
    losses = path_losses(model, batch, tuple(weights))
    total = None
    for p, w in weights.items():
        term = scale(losses[p], w)
        total = term if total is None else add(total, term)
    if not np.isfinite(total.item()):
        raise TrainingDiverged(f"non-finite loss {total.item()}")
    backward(total)
    out = {f"loss_{p.value}": losses[p].item() for p in weights}
    out["loss"] = total.item()
    return out


def evaluate_loss(model, items, weights: dict[PathSelector, float], batch_size: int) -> dict[str, float]:
    sums: dict[str, float] = {}
    n = 0
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        batch = make_batch(chunk, model.dtype)
        losses = path_losses(model, batch, tuple(weights))
        total = sum(w * losses[p].item() for p, w in weights.items())
        for key, val in [("loss", total)] + [(f"loss_{p.value}", losses[p].item()) for p in weights]:
            sums[key] = sums.get(key, 0.0) + val * len(chunk)
        n += len(chunk)
    return {k: v / n for k, v in sums.items()}


@dataclass
class History:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict, log_path: Path | None = None) -> None:
        self.records.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def column(self, key: str) -> list[float]:
        return [r[key] for r in self.records if key in r]


def train_loop(
    model: SeparationModel,
    train_items,
    val_items,
    cfg: TrainConfig,
    log_path=None,
    eval_fn=None,
) -> tuple[Checkpoint, History]:
    """Train ``model`` in place and return the best-validation checkpoint.

    Epoch 0 in the history is the untrained state (no updates). ``eval_fn``,
    if given, is called as ``eval_fn(model, epoch)`` and its dict is merged
    into each epoch record.
    """
    if not train_items or not val_items:
        raise ValueError("training and validation sets must be nonempty")
    weights = cfg.path_weights()
    for p in weights:
        if not model.supports(p):
            raise PathError(f"strategy {cfg.strategy} needs the {p.value} path, which this model lacks")
    log_path = Path(log_path) if log_path else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    rng = Rng(cfg.seed)
    params = model.parameters()
    opt = OptimizerState.for_params(params)
    decay = PlateauDecay(cfg.lr0, cfg.lr_decay, cfg.decay_patience_epochs)
    stopper = EarlyStopping(cfg.early_stop_patience)
    history = History()

    def record(epoch, train_stats, lr, extra=None):
        val = evaluate_loss(model, val_items, weights, cfg.batch_size)
        rec = {"epoch": epoch, "lr": lr, "step": opt.step}
        rec.update({f"train_{k}": v for k, v in train_stats.items()})
        rec.update({f"val_{k}": v for k, v in val.items()})
        if eval_fn is not None:
            rec.update(eval_fn(model, epoch))
        if extra:
            rec.update(extra)
        return rec

    start = record(0, evaluate_loss(model, train_items, weights, cfg.batch_size), decay.lr)
    history.append(start, log_path)
    stopper.update(start["val_loss"], 0)
    best = Checkpoint.from_model(model, {"epoch": 0, "val_loss": start["val_loss"]})

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_items))
        sums: dict[str, float] = {}
        n_seen = 0
        for s in range(0, len(order), cfg.batch_size):
            items = [train_items[i] for i in order[s : s + cfg.batch_size]]
            batch = make_batch(items, model.dtype)
            model.zero_grad()
            try:
                stats = _weighted_step(model, batch, weights)
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {opt.step + 1}: {exc}") from exc
            clip_gradients(params, cfg.clip_norm)
            adam_step(opt, params, decay.lr)
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v * len(items)
            n_seen += len(items)
            if cfg.max_steps is not None and opt.step >= cfg.max_steps:
                break
        train_stats = {k: v / n_seen for k, v in sums.items()}
        lr_used = decay.lr
        decay.update(train_stats["loss"])
        rec = record(epoch, train_stats, lr_used, {"next_lr": decay.lr, "seconds": time.perf_counter() - t0})
        history.append(rec, log_path)
        log.info("epoch %d train %.3f val %.3f lr %.2e", epoch, rec["train_loss"], rec["val_loss"], lr_used)
        stop = stopper.update(rec["val_loss"], epoch)
        if stopper.best_epoch == epoch:
            best = Checkpoint.from_model(model, {"epoch": epoch, "val_loss": rec["val_loss"]})
        if stop or (cfg.max_steps is not None and opt.step >= cfg.max_steps):
            break
    best.metadata.update({"best_epoch": stopper.best_epoch, "train_config": asdict(cfg)})
    return best, history
