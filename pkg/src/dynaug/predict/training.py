"""Training and MAE evaluation for the age regressors, plus checkpointing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tsaf
from ..forecast import TrainingDivergedError
from ..numerics import AdamOptimizer, RngStream, mae
from .models import CnnConfig, CnnModel, TalstmConfig, TimeAttentionLstm

__all__ = [
    "PREDICTOR_KINDS",
    "PredictorTrainConfig",
    "build_predictor",
    "evaluate_mae",
    "load_predictor",
    "predict_ages",
    "save_predictor",
    "stack_records",
    "train_predictor",
]

PREDICTOR_KINDS = ("cnn", "cnn-att", "talstm")


@dataclass
class PredictorTrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    fc1_width: int = 128
    heads: int = 2
    hidden: int = 64
    d_att: int = 64
    depth: int = 3
    shared_towers: bool = False
    eq1_literal: bool = False


def stack_records(records):
    """Stack records into (X: (B, C, T), ages: (B,)); series must be uniform."""
    if not records:
        raise ValueError("empty record set")
    c = records[0].channels
    t = records[0].length
    for rec in records:
        if rec.channels != c or rec.length != t:
            raise ValueError(
                f"record {rec.subject_id!r} has shape ({rec.channels}, {rec.length}), "
                f"expected ({c}, {t}); predictors need uniform series")
    x = np.stack([rec.series for rec in records])
    ages = np.array([rec.age for rec in records])
    return x, ages


def build_predictor(kind: str, channels: int, length: int,
                    config: PredictorTrainConfig, rng: RngStream):
    if kind in ("cnn", "cnn-att"):
        return CnnModel(CnnConfig(
            channels=channels, length=length, fc1_width=config.fc1_width,
            with_attention=(kind == "cnn-att"), heads=config.heads,
            shared_towers=config.shared_towers), rng)
    if kind == "talstm":
        return TimeAttentionLstm(TalstmConfig(
            channels=channels, hidden=config.hidden, depth=config.depth,
            d_att=config.d_att, eq1_literal=config.eq1_literal), rng)
    raise ValueError(f"unknown predictor kind {kind!r}; expected one of {PREDICTOR_KINDS}")


def train_predictor(kind: str, records, config: PredictorTrainConfig):
    """Train one regressor on (series -> age); returns (model, loss_log).

    Targets are standardized with the training-set mean/std (stored on the
    model and inverted at prediction time); the log has one
    (epoch, train_mse) row per epoch in standardized units.
    """
    x, ages = stack_records(records)
    n = x.shape[0]
    rng = RngStream(config.seed, f"predictor/{kind}")
    model = build_predictor(kind, x.shape[1], x.shape[2], config, rng.derive("init"))
    model.target_mean = float(ages.mean())
    std = float(ages.std())
    model.target_std = std if std > 1e-12 else 1.0
    targets = (ages - model.target_mean) / model.target_std

    opt = AdamOptimizer(model.params(), lr=config.lr)
    shuffle = rng.derive("shuffle").generator()
    log = []
    for epoch in range(1, config.epochs + 1):
        perm = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads = model.loss_and_grads(x[idx], targets[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, f"training loss is {loss}")
            opt.step(grads)
            total += loss * idx.size
        log.append((epoch, total / n))
    return model, log


def predict_ages(model, records, chunk: int = 32) -> np.ndarray:
    """Predicted ages in years, evaluated in memory-bounded chunks."""
    x, _ = stack_records(records)
    parts = [model.predict_ages(x[s:s + chunk]) for s in range(0, x.shape[0], chunk)]
    return np.concatenate(parts)


def evaluate_mae(model, records) -> float:
    """Mean absolute error of predicted vs true ages over a record set."""
    if not records:
        raise ValueError("cannot evaluate on an empty record set")
    preds = predict_ages(model, records)
    ages = np.array([rec.age for rec in records])
    return mae(preds, ages)


def _predictor_config_dict(model, kind: str) -> dict:
    if isinstance(model, CnnModel):
        cfg = model.config
        return {"kind": kind, "channels": cfg.channels, "length": cfg.length,
                "filters1": cfg.filters1, "filters2": cfg.filters2, "kernel": cfg.kernel,
                "fc1_width": cfg.fc1_width, "heads": cfg.heads,
                "with_attention": cfg.with_attention, "shared_towers": cfg.shared_towers,
                "target_mean": model.target_mean, "target_std": model.target_std}
    cfg = model.config
    return {"kind": kind, "channels": cfg.channels, "hidden": cfg.hidden,
            "depth": cfg.depth, "d_att": cfg.d_att, "eq1_literal": cfg.eq1_literal,
            "target_mean": model.target_mean, "target_std": model.target_std}


def save_predictor(model, path) -> None:
    """Write a predictor checkpoint (modes cnn / cnn-att / talstm)."""
    if isinstance(model, CnnModel):
        kind = "cnn-att" if model.config.with_attention else "cnn"
    elif isinstance(model, TimeAttentionLstm):
        kind = "talstm"
    else:
        raise ValueError(f"not a predictor model: {type(model)!r}")
    tsaf.save_tsaf(path, kind, _predictor_config_dict(model, kind),
                   {k: v.copy() for k, v in model.params().items()})


def load_predictor(path):
    """Rebuild a predictor from a TSAF checkpoint; bit-exact parameters."""
    kind, cfg, tensors = tsaf.load_tsaf(path)
    if kind not in PREDICTOR_KINDS:
        raise ValueError(f"{path}: checkpoint mode {kind!r} is not a predictor")
    rng = RngStream(0, "predictor-load")
    if kind in ("cnn", "cnn-att"):
        model = CnnModel(CnnConfig(
            channels=int(cfg["channels"]), length=int(cfg["length"]),
            filters1=int(cfg["filters1"]), filters2=int(cfg["filters2"]),
            kernel=int(cfg["kernel"]), fc1_width=int(cfg["fc1_width"]),
            with_attention=bool(cfg["with_attention"]), heads=int(cfg["heads"]),
            shared_towers=bool(cfg["shared_towers"])), rng)
    else:
        model = TimeAttentionLstm(TalstmConfig(
            channels=int(cfg["channels"]), hidden=int(cfg["hidden"]),
            depth=int(cfg["depth"]), d_att=int(cfg["d_att"]),
            eq1_literal=bool(cfg["eq1_literal"])), rng)
    params = model.params()
    if set(params) != set(tensors):
        raise ValueError(f"{path}: checkpoint tensors do not match the declared model")
    for name, p in params.items():
        p[...] = tensors[name].reshape(p.shape)
    model.target_mean = float(cfg["target_mean"])
    model.target_std = float(cfg["target_std"])
    return model
