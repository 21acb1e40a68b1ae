"""Command-line surface: gen-data, train-forecaster, augment, evaluate, sweep, verify.

Config files are JSON with the same keys as ExperimentConfig; command-line
flags override file values. All randomness flows from ``--seed``. Exit codes:
0 success, 1 usage or configuration error, 2 numerical failure (diverged
training). stdout carries data and paths, stderr the reasons.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .dataset import DataFormatError, gen_synthetic, load_tsds, save_tsds, zscore
from .forecast import TrainingDivergedError, load_checkpoint, save_checkpoint
from .numerics import RngStream
from .pipeline import (
    BASELINE_TAG,
    ExperimentConfig,
    RunManifest,
    _sha256,
    augment_dataset,
    run_augment_stage,
    run_validation,
    step_sweep,
    write_aggregate_csv,
    write_fold_csv,
    write_loss_csv,
)
from .predict import PREDICTOR_KINDS
from . import tsaf

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the contract wants 1
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ValueError(f"config file {path}: top level must be a JSON object")
    return data


def _build_config(config_path, **overrides) -> ExperimentConfig:
    merged = _load_config_file(config_path) if config_path else {}
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return ExperimentConfig.from_dict(merged)


def _parse_models(spec: str) -> tuple[str, ...]:
    models = tuple(m.strip() for m in spec.split(",") if m.strip())
    if not models:
        raise ValueError("no models given")
    for m in models:
        if m not in PREDICTOR_KINDS:
            raise ValueError(f"unknown model {m!r}; expected one of {PREDICTOR_KINDS}")
    return models


def _parse_steps(spec: str) -> list[int]:
    try:
        steps = [int(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"steps must be a comma-separated list of integers, got {spec!r}") from None
    if not steps:
        raise ValueError("no steps given")
    if any(s < 1 for s in steps):
        raise ValueError(f"steps must be >= 1, got {steps}")
    unique = sorted(set(steps))
    if len(unique) != len(steps):
        print(f"warning: duplicate steps in {steps} deduplicated to {unique}", file=sys.stderr)
    return unique


def _uniform_length(records, what: str) -> int:
    lengths = {r.length for r in records}
    if len(lengths) != 1:
        raise ValueError(f"{what}: series lengths differ across subjects: {sorted(lengths)}")
    return lengths.pop()


def _write_run_outputs(out_dir: Path, config: ExperimentConfig, reports, inputs: dict,
                       prefix: str = "report") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    folds_name = f"{prefix}_folds.csv"
    agg_name = f"{prefix}_aggregate.csv"
    write_fold_csv(reports, out_dir / folds_name)
    write_aggregate_csv(reports, out_dir / agg_name)
    manifest = RunManifest(
        config=config.to_dict(),
        stages=["validate", "report"],
        checkpoints={},
        datasets=inputs,
        reports={"folds": folds_name, "aggregate": agg_name},
        artifacts={name: _sha256(out_dir / name) for name in sorted([folds_name, agg_name])},
    )
    manifest.save(out_dir / "manifest.json")
    with open(out_dir / manifest.timings_file, "w", encoding="utf-8") as fh:
        json.dump({}, fh)
        fh.write("\n")
    print(out_dir / folds_name)
    print(out_dir / agg_name)
    print(out_dir / "manifest.json")


def _cmd_gen_data(args) -> int:
    records = gen_synthetic(args.subjects, args.channels, args.length,
                            RngStream(args.seed, "synthetic"), args.tr)
    save_tsds(records, args.out)
    print(args.out)
    return 0


def _cmd_train_forecaster(args) -> int:
    config = _build_config(
        args.config, seed=args.seed, window=args.window, input_len=args.input_len,
        stride=args.stride, hidden_size=args.hidden, forecaster_epochs=args.epochs,
        forecaster_batch=args.batch, forecaster_lr=args.lr,
        train_fraction=args.train_fraction,
        normalize=False if args.no_normalize else None)
    config = replace(config, forecaster_modes=(args.mode,))
    records = load_tsds(args.data)
    if config.normalize:
        records = [zscore(r) for r in records]
    stage = run_augment_stage(config, records)
    ckpt_path = Path(args.out)
    loss_path = Path(args.loss_csv) if args.loss_csv else \
        ckpt_path.with_name(ckpt_path.stem + "_loss.csv")
    save_checkpoint(stage.checkpoints[args.mode], ckpt_path)
    write_loss_csv(stage.loss_logs[args.mode], loss_path)
    print(ckpt_path)
    print(loss_path)
    return 0


def _cmd_augment(args) -> int:
    if args.steps < 1:
        raise ValueError(f"--steps must be >= 1, got {args.steps}")
    records = load_tsds(args.data)
    ckpt = load_checkpoint(args.ckpt)
    extended = augment_dataset(records, ckpt, args.steps)
    save_tsds(extended, args.out)
    print(args.out)
    return 0


def _cmd_evaluate(args) -> int:
    models = _parse_models(args.models)
    config = _build_config(
        args.config, seed=args.seed, kfold=args.kfold,
        predictor_epochs=args.epochs, predictor_batch=args.batch,
        predictor_lr=args.lr,
        augment_train_only=True if args.augment_train_only else None)
    config = replace(config, predictors=models)
    baseline = load_tsds(args.baseline)
    augmented = load_tsds(args.augmented)
    step = _uniform_length(augmented, args.augmented) - _uniform_length(baseline, args.baseline)
    if step < 0:
        raise ValueError(
            f"augmented series ({args.augmented}) are shorter than baseline ({args.baseline})")
    reports, _ = run_validation(config, baseline, {("augmented", step): augmented})
    _write_run_outputs(Path(args.out), config,
                       reports, {"baseline": str(args.baseline), "augmented": str(args.augmented)})
    return 0


def _cmd_sweep(args) -> int:
    models = _parse_models(args.models)
    steps = _parse_steps(args.steps)
    config = _build_config(
        args.config, seed=args.seed, kfold=args.kfold,
        predictor_epochs=args.epochs, predictor_batch=args.batch, predictor_lr=args.lr)
    records = load_tsds(args.data)
    ckpt = load_checkpoint(args.ckpt)
    reports, _ = step_sweep(config, records, ckpt, steps=steps, predictors=models)
    _write_run_outputs(Path(args.out), config, reports,
                       {"data": str(args.data), "checkpoint": str(args.ckpt)},
                       prefix="sweep")
    return 0


def _cmd_verify(args) -> int:
    did_anything = False
    if args.data:
        records = load_tsds(args.data)
        lengths = sorted({r.length for r in records})
        print(f"OK {args.data}: {len(records)} subjects, {records[0].channels} channels, "
              f"lengths {lengths}")
        did_anything = True
    if args.ckpt:
        mode, config, tensors = tsaf.load_tsaf(args.ckpt)
        n_params = sum(t.size for t in tensors.values())
        print(f"OK {args.ckpt}: mode {mode}, {len(tensors)} tensors, {n_params} parameters")
        did_anything = True
    if args.original or args.extended:
        if not (args.original and args.extended):
            raise ValueError("prefix check needs both --original and --extended")
        original = {r.subject_id: r for r in load_tsds(args.original)}
        extended = {r.subject_id: r for r in load_tsds(args.extended)}
        if sorted(original) != sorted(extended):
            raise ValueError("subject sets differ between original and extended datasets")
        growths = set()
        for sid, orig in original.items():
            ext = extended[sid]
            growth = ext.length - orig.length
            if growth < 0:
                raise ValueError(f"subject {sid!r}: extended series is shorter than original")
            if ext.series[:, :orig.length].tobytes() != orig.series.tobytes():
                raise ValueError(f"subject {sid!r}: extended series does not preserve "
                                 f"the original prefix bitwise")
            growths.add(growth)
        if len(growths) != 1:
            raise ValueError(f"extension length differs across subjects: {sorted(growths)}")
        print(f"OK prefix: {len(original)} subjects, +{growths.pop()} points each")
        did_anything = True
    if not did_anything:
        raise ValueError("nothing to verify: pass --data, --ckpt, or --original/--extended")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynaug",
                     description="LSTM dynamic-forecasting augmentation for "
                                 "multivariate time series")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic TSDS dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tr", type=float, default=2.94, help="sampling interval in seconds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-forecaster", help="train a forecaster on a TSDS dataset")
    p.add_argument("--mode", choices=("stateless", "recursive"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (TSAF)")
    p.add_argument("--loss-csv", default=None, help="per-epoch loss CSV path")
    p.add_argument("--config", default=None, help="JSON config file; flags override")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--input-len", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=None)
    p.add_argument("--no-normalize", action="store_true",
                   help="skip per-channel z-scoring before windowing")
    p.set_defaults(func=_cmd_train_forecaster)

    p = sub.add_parser("augment", help="append forecast points to every series")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("evaluate", help="paired k-fold comparison of two datasets")
    p.add_argument("--baseline", required=True)
    p.add_argument("--augmented", required=True)
    p.add_argument("--models", default=",".join(PREDICTOR_KINDS))
    p.add_argument("--kfold", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None, help="predictor epochs")
    p.add_argument("--batch", type=int, default=None, help="predictor batch size")
    p.add_argument("--lr", type=float, default=None, help="predictor learning rate")
    p.add_argument("--augment-train-only", action="store_true",
                   help="evaluate augmented arms on original test-fold series")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="augmentation step-size sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", default="4,6,8,10,12,14")
    p.add_argument("--models", default="talstm")
    p.add_argument("--kfold", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None, help="predictor epochs")
    p.add_argument("--batch", type=int, default=None, help="predictor batch size")
    p.add_argument("--lr", type=float, default=None, help="predictor learning rate")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("verify", help="check TSDS/TSAF integrity and augmentation prefixes")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--original", default=None)
    p.add_argument("--extended", default=None)
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"dynaug {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, DataFormatError, OSError) as exc:
        print(f"dynaug {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
