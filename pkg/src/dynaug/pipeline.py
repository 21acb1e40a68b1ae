"""Two-stage experiment orchestration.

Stage one trains the forecasters on 80:20 subject-split windows and saves
checkpoints plus per-epoch loss curves. Stage two extends every series by
dynamic forecasting and compares regressors on baseline vs. extended arms
under subject-level k-fold cross-validation with shared fold assignments.

All randomness derives from one master seed via labeled RngStreams, so a rerun
with the same config is byte-identical (wall-clock timings go to a sidecar
file, never into the manifest).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataset import TimeSeriesRecord, gen_synthetic, kfold_split, load_tsds, save_tsds, \
    slide_windows, subject_split, zscore
from .forecast import ForecasterCheckpoint, TrainConfig, save_checkpoint, train_forecaster
from .numerics import RngStream
from .predict import PREDICTOR_KINDS, PredictorTrainConfig, evaluate_mae, train_predictor

__all__ = [
    "EvalReport",
    "ExperimentConfig",
    "RunManifest",
    "augment_dataset",
    "run_augment_stage",
    "run_experiment",
    "run_validation",
    "step_sweep",
    "write_aggregate_csv",
    "write_fold_csv",
    "write_loss_csv",
]

BASELINE_TAG = "baseline"


@dataclass
class ExperimentConfig:
    """Fully-resolved experiment description; everything derives from ``seed``."""

    # dataset source: a TSDS file, or a synthetic spec when data_path is None
    data_path: str | None = None
    subjects: int = 100
    channels: int = 8
    length: int = 122
    tr_seconds: float = 2.94
    normalize: bool = True
    # window geometry
    window: int = 24
    input_len: int = 20
    stride: int = 1
    # augmentation stage
    forecaster_modes: tuple[str, ...] = ("stateless", "recursive")
    hidden_size: int = 50
    forecaster_epochs: int = 500
    forecaster_batch: int = 64
    forecaster_lr: float = 1e-3
    train_fraction: float = 0.8
    # validation stage
    predictors: tuple[str, ...] = PREDICTOR_KINDS
    kfold: int = 10
    predictor_epochs: int = 100
    predictor_batch: int = 32
    predictor_lr: float = 1e-3
    fc1_width: int = 128
    heads: int = 2
    talstm_hidden: int = 64
    d_att: int = 64
    talstm_depth: int = 3
    shared_towers: bool = False
    eq1_literal: bool = False
    augment_train_only: bool = False
    # comparison arms
    table1_forecaster: str = "stateless"
    table1_step: int = 4
    sweep_forecaster: str = "recursive"
    sweep_steps: tuple[int, ...] = (4, 6, 8, 10, 12, 14)
    sweep_predictors: tuple[str, ...] = ("talstm",)
    seed: int = 0

    def __post_init__(self):
        for kind in tuple(self.predictors) + tuple(self.sweep_predictors):
            if kind not in PREDICTOR_KINDS:
                raise ValueError(f"unknown predictor {kind!r}; expected one of {PREDICTOR_KINDS}")
        for mode in self.forecaster_modes:
            if mode not in ("stateless", "recursive"):
                raise ValueError(f"unknown forecaster mode {mode!r}")
        if not (1 <= self.input_len < self.window):
            raise ValueError(f"need 1 <= input_len < window, got {self.input_len}/{self.window}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = dict(data)
        for key in ("forecaster_modes", "predictors", "sweep_steps", "sweep_predictors"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(**cfg)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("forecaster_modes", "predictors", "sweep_steps", "sweep_predictors"):
            out[key] = list(out[key])
        return out

    def predictor_train_config(self, seed: int) -> PredictorTrainConfig:
        return PredictorTrainConfig(
            epochs=self.predictor_epochs, batch_size=self.predictor_batch,
            lr=self.predictor_lr, seed=seed, fc1_width=self.fc1_width, heads=self.heads,
            hidden=self.talstm_hidden, d_att=self.d_att, depth=self.talstm_depth,
            shared_towers=self.shared_towers, eq1_literal=self.eq1_literal)


@dataclass
class EvalReport:
    """Per-fold and aggregate MAE for one (model, dataset arm) cell."""

    model: str
    dataset: str
    step: int
    fold_maes: list[float]
    mean_mae: float
    std_mae: float

    @classmethod
    def from_folds(cls, model: str, dataset: str, step: int, maes) -> "EvalReport":
        arr = np.asarray(maes, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return cls(model, dataset, step, [float(m) for m in maes], float(arr.mean()), std)


def _derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _records_by_id(records) -> dict[str, TimeSeriesRecord]:
    return {r.subject_id: r for r in records}


# --- stage one: forecaster training ------------------------------------------


@dataclass
class AugmentStageResult:
    split_train: list[str]
    split_test: list[str]
    checkpoints: dict[str, ForecasterCheckpoint]
    loss_logs: dict[str, list[tuple[int, float, float]]]
    checkpoint_paths: dict[str, str] = field(default_factory=dict)
    loss_paths: dict[str, str] = field(default_factory=dict)


def run_augment_stage(config: ExperimentConfig, records,
                      out_dir: Path | None = None) -> AugmentStageResult:
    """Window the records, split 80:20 by subject, train the forecasters.

    With ``out_dir`` set, writes ``forecaster_<mode>.tsaf`` and
    ``loss_<mode>.csv`` per configured mode.
    """
    split = subject_split(records, config.train_fraction,
                          RngStream(config.seed, "augment/split"))
    by_id = _records_by_id(records)
    train_windows = []
    test_windows = []
    for sid in sorted(by_id):
        windows = slide_windows(by_id[sid], config.window, config.input_len, config.stride)
        (train_windows if sid in split.train_subjects else test_windows).extend(windows)

    result = AugmentStageResult(
        split_train=sorted(split.train_subjects),
        split_test=sorted(split.test_subjects),
        checkpoints={}, loss_logs={})
    for mode in config.forecaster_modes:
        tc = TrainConfig(epochs=config.forecaster_epochs, batch_size=config.forecaster_batch,
                         lr=config.forecaster_lr,
                         seed=_derive_seed(config.seed, f"augment/{mode}"),
                         hidden_size=config.hidden_size, normalize=config.normalize)
        ckpt, log = train_forecaster(mode, train_windows, test_windows, tc)
        result.checkpoints[mode] = ckpt
        result.loss_logs[mode] = log
        if out_dir is not None:
            ckpt_path = Path(out_dir) / f"forecaster_{mode}.tsaf"
            loss_path = Path(out_dir) / f"loss_{mode}.csv"
            save_checkpoint(ckpt, ckpt_path)
            write_loss_csv(log, loss_path)
            result.checkpoint_paths[mode] = ckpt_path.name
            result.loss_paths[mode] = loss_path.name
    return result


# --- dataset extension ---------------------------------------------------------


def augment_dataset(records, ckpt: ForecasterCheckpoint, steps: int) -> list[TimeSeriesRecord]:
    """Append ``steps`` forecast points to every record (append-only).

    The forecaster reads the final input window of each series (the seed for
    the appended block) and the forecasts are concatenated along time; the
    original samples are never modified. Stateless checkpoints chain whole
    blocks, so ``steps`` must be a multiple of their horizon.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    model = ckpt.build_model()
    input_len = int(ckpt.config["input_len"])
    extended = []
    for rec in records:
        if rec.channels != model.channels:
            raise ValueError(
                f"record {rec.subject_id!r} has {rec.channels} channels, "
                f"checkpoint expects {model.channels}")
        if rec.length < input_len:
            raise ValueError(
                f"record {rec.subject_id!r}: length {rec.length} shorter than "
                f"forecaster input window {input_len}")
        tail = rec.series.T[-input_len:]
        if ckpt.mode == "recursive":
            block = model.forecast(tail, steps)
        else:
            horizon = model.horizon
            if steps % horizon != 0:
                raise ValueError(
                    f"stateless checkpoint forecasts blocks of {horizon}; "
                    f"steps={steps} is not a multiple")
            parts = []
            window = tail
            for _ in range(steps // horizon):
                part = model.forecast(window)
                parts.append(part)
                window = np.concatenate([window, part])[-input_len:]
            block = np.concatenate(parts)
        extended.append(replace(
            rec, series=np.concatenate([rec.series, block.T], axis=1)))
    return extended


# --- stage two: cross-validated comparison --------------------------------------


def _check_same_subjects(baseline, records, tag: str) -> None:
    base_ids = sorted(r.subject_id for r in baseline)
    arm_ids = sorted(r.subject_id for r in records)
    if base_ids != arm_ids:
        raise ValueError(f"arm {tag!r} does not cover the same subjects as the baseline")


def _evaluate_cells(config: ExperimentConfig, arms: dict[tuple[str, int], list],
                    cells: list[tuple[str, str, int]], folds) -> list[EvalReport]:
    """Train/evaluate one predictor per (model, arm, fold); paired folds across arms."""
    baseline_by_id = _records_by_id(arms[(BASELINE_TAG, 0)])
    reports = []
    for kind, dataset, step in cells:
        records = arms[(dataset, step)]
        by_id = _records_by_id(records)
        use_baseline_test = config.augment_train_only and dataset != BASELINE_TAG
        if use_baseline_test and kind != "talstm":
            raise ValueError(
                "augment_train_only needs length-agnostic predictors; "
                f"{kind!r} requires uniform series lengths (use talstm)")
        maes = []
        for i, plan in enumerate(folds):
            train_recs = [by_id[s] for s in sorted(plan.train_subjects)]
            test_source = baseline_by_id if use_baseline_test else by_id
            test_recs = [test_source[s] for s in sorted(plan.test_subjects)]
            cell_seed = _derive_seed(config.seed, f"validate/{kind}/{dataset}@{step}/fold{i}")
            model, _ = train_predictor(kind, train_recs, config.predictor_train_config(cell_seed))
            maes.append(evaluate_mae(model, test_recs))
        reports.append(EvalReport.from_folds(kind, dataset, step, maes))
    return reports


def run_validation(config: ExperimentConfig, baseline_records, augmented_arms):
    """Paired k-fold comparison of baseline vs. augmented arms.

    ``augmented_arms`` maps (dataset_tag, step) -> records; all arms must
    cover exactly the baseline's subjects. Fold assignments are computed once
    from the baseline and shared by every arm. Returns (reports, folds).
    """
    arms = {(BASELINE_TAG, 0): list(baseline_records)}
    for (tag, step), records in augmented_arms.items():
        if tag == BASELINE_TAG:
            raise ValueError("augmented arm cannot be tagged 'baseline'")
        _check_same_subjects(baseline_records, records, tag)
        arms[(tag, step)] = list(records)
    folds = kfold_split(baseline_records, config.kfold, RngStream(config.seed, "validation/folds"))
    cells = [(kind, tag, step)
             for kind in config.predictors
             for (tag, step) in arms]
    reports = _evaluate_cells(config, arms, cells, folds)
    return reports, folds


def step_sweep(config: ExperimentConfig, records, ckpt: ForecasterCheckpoint,
               steps=None, predictors=None):
    """One augmented dataset + paired validation per step, sharing the baseline arm."""
    steps = list(config.sweep_steps if steps is None else steps)
    if not steps:
        raise ValueError("sweep needs at least one step")
    ordered = sorted(set(int(s) for s in steps))
    predictors = tuple(predictors if predictors is not None else config.sweep_predictors)
    tag = f"augmented-{ckpt.mode}"
    arms = {(BASELINE_TAG, 0): list(records)}
    for n in ordered:
        arms[(tag, n)] = augment_dataset(records, ckpt, n)
    folds = kfold_split(records, config.kfold, RngStream(config.seed, "validation/folds"))
    cells = [(kind, t, s) for kind in predictors for (t, s) in arms]
    reports = _evaluate_cells(config, arms, cells, folds)
    return reports, folds


# --- report and manifest files ----------------------------------------------------


def write_loss_csv(log, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "test_mse"])
        for epoch, train_mse, test_mse in log:
            writer.writerow([epoch, repr(float(train_mse)), repr(float(test_mse))])


def write_fold_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "dataset", "step", "fold", "mae"])
        for rep in reports:
            for fold, value in enumerate(rep.fold_maes):
                writer.writerow([rep.model, rep.dataset, rep.step, fold, repr(value)])


def write_aggregate_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "dataset", "step", "mean_mae", "std_mae"])
        for rep in reports:
            writer.writerow([rep.model, rep.dataset, rep.step,
                             repr(rep.mean_mae), repr(rep.std_mae)])


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to re-run and audit an experiment bit-identically.

    Paths are relative to the manifest's directory; artifact hashes cover
    every written file. Wall-clock timings live in the sidecar named by
    ``timings_file`` so the manifest itself is deterministic.
    """

    config: dict
    stages: list[str]
    checkpoints: dict[str, str]
    datasets: dict[str, str]
    reports: dict[str, str]
    artifacts: dict[str, str]
    timings_file: str = "timings.json"
    format_version: int = 1

    def save(self, path) -> None:
        payload = {
            "format_version": self.format_version,
            "config": self.config,
            "stages": self.stages,
            "checkpoints": self.checkpoints,
            "datasets": self.datasets,
            "reports": self.reports,
            "artifacts": self.artifacts,
            "timings_file": self.timings_file,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        version = payload.pop("format_version", None)
        if version != 1:
            raise ValueError(f"{path}: unsupported manifest version {version}")
        return cls(format_version=1, **payload)


def _load_experiment_records(config: ExperimentConfig):
    if config.data_path is not None:
        records = load_tsds(config.data_path)
        if config.normalize:
            records = [zscore(r) for r in records]
        return records
    return gen_synthetic(config.subjects, config.channels, config.length,
                         RngStream(config.seed, "synthetic"), config.tr_seconds)


def run_experiment(config: ExperimentConfig, out_dir) -> RunManifest:
    """Full two-stage pipeline; writes datasets, checkpoints, reports, manifest.

    The validation grid is the union of the model-comparison arms (all
    predictors on baseline + one augmented arm) and the step-sweep arms
    (sweep predictors on baseline + one arm per step); shared cells are
    trained once.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    stages: list[str] = []

    t0 = time.perf_counter()
    records = _load_experiment_records(config)
    baseline_path = out / "dataset_baseline.tsds"
    save_tsds(records, baseline_path)
    timings["data"] = time.perf_counter() - t0
    stages.append("data")

    t0 = time.perf_counter()
    stage = run_augment_stage(config, records, out_dir=out)
    timings["augment-stage"] = time.perf_counter() - t0
    stages.append("augment-stage")

    # distinct augmented arms: the model-comparison arm plus the sweep arms
    t0 = time.perf_counter()
    arm_specs: list[tuple[str, int]] = []
    table1_arm = (config.table1_forecaster, config.table1_step)
    for spec in [table1_arm] + [(config.sweep_forecaster, s) for s in config.sweep_steps]:
        if spec not in arm_specs:
            arm_specs.append(spec)
    datasets = {"baseline": baseline_path.name}
    arms: dict[tuple[str, int], list] = {(BASELINE_TAG, 0): records}
    for mode, step in arm_specs:
        if mode not in stage.checkpoints:
            raise ValueError(f"arm needs forecaster {mode!r}, not in forecaster_modes")
        arm_records = augment_dataset(records, stage.checkpoints[mode], step)
        tag = f"augmented-{mode}"
        arms[(tag, step)] = arm_records
        path = out / f"dataset_{mode}_step{step}.tsds"
        save_tsds(arm_records, path)
        datasets[f"{tag}@{step}"] = path.name
    timings["augment"] = time.perf_counter() - t0
    stages.append("augment")

    t0 = time.perf_counter()
    folds = kfold_split(records, config.kfold, RngStream(config.seed, "validation/folds"))
    table1_tag = f"augmented-{config.table1_forecaster}"
    sweep_tag = f"augmented-{config.sweep_forecaster}"
    cells: list[tuple[str, str, int]] = []
    for kind in config.predictors:
        for arm in [(BASELINE_TAG, 0), (table1_tag, config.table1_step)]:
            cells.append((kind, arm[0], arm[1]))
    for kind in config.sweep_predictors:
        for arm in [(BASELINE_TAG, 0)] + [(sweep_tag, s) for s in config.sweep_steps]:
            cell = (kind, arm[0], arm[1])
            if cell not in cells:
                cells.append(cell)
    reports = _evaluate_cells(config, arms, cells, folds)
    timings["validate"] = time.perf_counter() - t0
    stages.append("validate")

    t0 = time.perf_counter()
    by_cell = {(r.model, r.dataset, r.step): r for r in reports}
    table1 = [by_cell[(kind, tag, step)]
              for kind in config.predictors
              for (tag, step) in [(BASELINE_TAG, 0), (table1_tag, config.table1_step)]]
    sweep = [by_cell[(kind, tag, step)]
             for kind in config.sweep_predictors
             for (tag, step) in [(BASELINE_TAG, 0)] + [(sweep_tag, s) for s in config.sweep_steps]]
    report_paths = {
        "folds": "report_folds.csv",
        "aggregate": "report_aggregate.csv",
        "table1": "table1_aggregate.csv",
        "sweep": "sweep_aggregate.csv",
    }
    write_fold_csv(reports, out / report_paths["folds"])
    write_aggregate_csv(reports, out / report_paths["aggregate"])
    write_aggregate_csv(table1, out / report_paths["table1"])
    write_aggregate_csv(sweep, out / report_paths["sweep"])
    stages.append("report")
    timings["report"] = time.perf_counter() - t0

    artifact_names = [baseline_path.name]
    artifact_names += [stage.checkpoint_paths[m] for m in config.forecaster_modes]
    artifact_names += [stage.loss_paths[m] for m in config.forecaster_modes]
    artifact_names += [name for name in datasets.values() if name != baseline_path.name]
    artifact_names += list(report_paths.values())
    manifest = RunManifest(
        config=config.to_dict(),
        stages=stages,
        checkpoints=dict(stage.checkpoint_paths),
        datasets=datasets,
        reports=report_paths,
        artifacts={name: _sha256(out / name) for name in sorted(artifact_names)},
    )
    manifest.save(out / "manifest.json")
    with open(out / manifest.timings_file, "w", encoding="utf-8") as fh:
        json.dump({k: round(v, 3) for k, v in timings.items()}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest
