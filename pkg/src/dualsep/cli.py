"""Command-line entry point: synth | train | eval | infer | selftest.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datagen import MixtureConfig, WavError, build_dataset, load_split, wav_read, wav_write
from .dualpath import PathError
from .metrics import evaluate
from .models import CheckpointError, build_model, init_from_offline, load_checkpoint, read_checkpoint, save_checkpoint
from .numcore import NumericalError
from .training import TrainConfig, evaluate_loss, train_loop
from .dualpath import PathSelector

log = logging.getLogger("dualsep")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    model: str = "td"
    scheme: str = "decomposed"
    path: str = "online"
    preset: str = "desk"
    model_config: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    data: str | None = None
    init_from: str | None = None
    multitask: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.model not in ("fd", "td"):
            raise UsageError(f"model must be fd or td, not {self.model!r}")
        if self.scheme not in ("standard", "decomposed", "reorganized"):
            raise UsageError(f"unknown scheme {self.scheme!r}")
        if self.path not in ("online", "offline"):
            raise UsageError(f"path must be online or offline, not {self.path!r}")
        if self.preset not in ("desk", "full"):
            raise UsageError(f"preset must be desk or full, not {self.preset!r}")
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(self.train) - known
        if unknown:
            raise UsageError(f"unknown train keys: {sorted(unknown)}")

    def strategy(self) -> str:
        if self.init_from and self.multitask:
            return "init_plus_multitask"
        if self.init_from:
            return "init_from_offline"
        if self.multitask:
            return "multitask"
        return "from_scratch_online" if self.path == "online" else "from_scratch_offline"

    def model_kwargs(self) -> dict:
        from .models import MODEL_KINDS

        config_cls = MODEL_KINDS[self.model][1]
        base = dataclasses.asdict(getattr(config_cls, self.preset)(self.scheme))
        unknown = set(self.model_config) - set(base)
        if unknown:
            raise UsageError(f"unknown {self.model} model keys: {sorted(unknown)}")
        base.update(self.model_config)
        base["scheme"] = self.scheme
        return base


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults < config file < command-line flags."""
    values: dict = {}
    if path:
        try:
            values = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys in {path}: {sorted(unknown)}")
    for k, v in overrides.items():
        if v is None:
            continue
        if k in ("model_config", "train"):
            values[k] = {**values.get(k, {}), **v}
        else:
            values[k] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _manifest(path: str | None) -> Path:
    if not path:
        raise UsageError("no dataset manifest given (--data)")
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.is_file():
        raise UsageError(f"dataset manifest not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    cfg = MixtureConfig(sample_rate_hz=args.sample_rate, duration_s=args.duration, reverb=args.reverb)
    manifest = build_dataset(cfg, args.n_train, args.n_val, args.n_test, args.seed, out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    train_over = {k: v for k, v in {
        "max_epochs": args.epochs, "max_steps": args.max_steps, "lr0": args.lr,
        "batch_size": args.batch_size, "w_offline": args.w_offline, "w_online": args.w_online,
    }.items() if v is not None}
    run = load_run_config(args.config, {
        "model": args.model, "scheme": args.scheme, "path": args.path, "preset": args.preset,
        "data": args.data, "init_from": args.init_from, "multitask": args.multitask or None,
        "seed": args.seed, "train": train_over or None,
    })
    manifest = _manifest(run.data)
    out = _out_dir(args.out)
    train_cfg = TrainConfig(**{**run.train, "seed": run.seed, "strategy": run.strategy()})
    train_items = load_split(manifest, "train")
    val_items = load_split(manifest, "val") or train_items

    init_record = None
    if run.init_from:
        try:
            source = read_checkpoint(run.init_from)
            if source.kind != run.model:
                raise UsageError(f"checkpoint holds a {source.kind} model, not {run.model}")
            pretrained = source.to_model()
            model = init_from_offline(source, run.scheme, seed=run.seed, target_config=run.model_config or None)
        except CheckpointError as exc:
            raise UsageError(f"cannot initialise from {run.init_from}: {exc}") from None
        offline = {PathSelector.OFFLINE: 1.0}
        init_record = {
            "event": "init_from_offline",
            "pretrained_val_loss_offline": evaluate_loss(pretrained, val_items, offline, train_cfg.batch_size)["loss"],
            "init_val_loss_offline": evaluate_loss(model, val_items, offline, train_cfg.batch_size)["loss"],
        }
    else:
        model = build_model(run.model, run.model_kwargs(), seed=run.seed)

    (out / "run_config.json").write_text(
        json.dumps({**dataclasses.asdict(run), "train_resolved": dataclasses.asdict(train_cfg)}, indent=2)
    )
    log_path = out / "train_log.jsonl"
    best, history = train_loop(model, train_items, val_items, train_cfg, log_path=log_path)
    if init_record is not None:
        with open(log_path, "a") as fh:
            fh.write(json.dumps(init_record) + "\n")
    save_checkpoint(best, out / "checkpoint")
    last = history.records[-1]
    print(f"trained {last['epoch']} epochs; best epoch {best.metadata['best_epoch']}; checkpoint {out / 'checkpoint'}")
    return EXIT_OK


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    if not model.supports(args.path):
        raise UsageError(f"a {model.scheme.value}-scheme checkpoint has no {args.path} path")
    items = load_split(_manifest(args.data), args.split)
    if not items:
        raise UsageError(f"split {args.split!r} is empty")
    report = evaluate(model, items, args.path)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}_{args.path}.jsonl"
    report.write(out)
    print(report.summary_line())
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint)
    if not model.supports(args.path):
        raise UsageError(f"a {model.scheme.value}-scheme checkpoint has no {args.path} path")
    try:
        wav, rate = wav_read(args.input)
    except (WavError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    if rate != model.config.sample_rate_hz:
        raise UsageError(f"input is {rate} Hz, model expects {model.config.sample_rate_hz} Hz")
    out = _out_dir(args.out)
    ests = model(wav, args.path).data
    for i, est in enumerate(ests):
        wav_write(out / f"s{i + 1}.wav", np.asarray(est), rate)
    print(f"wrote {len(ests)} sources to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(inject=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<36} {r.detail}  ({r.seconds:.1f}s)")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualsep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic mixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--n-test", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--reverb", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model under one of the strategies")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["fd", "td"])
    p.add_argument("--scheme", choices=["standard", "decomposed", "reorganized"])
    p.add_argument("--path", choices=["online", "offline"])
    p.add_argument("--preset", choices=["desk", "full"])
    p.add_argument("--init-from")
    p.add_argument("--multitask", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--w-offline", type=float)
    p.add_argument("--w-online", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--path", choices=["online", "offline"], default="online")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="separate one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--path", choices=["online", "offline"], default="online")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("selftest", help="run the built-in correctness checks")
    p.add_argument("--inject-fault", choices=["sigmoid_backward"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, PathError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
