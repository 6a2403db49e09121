"""AdamW training loop, evaluation metrics, the historical-average baseline and
embedding-neighbourhood validation."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import VARIANT_NAMES, ModelConfig
from .data import (
    MultiModalDataset,
    NormalizationState,
    Splits,
    denormalize_od,
    max_min_normalize,
    temporal_split,
)
from .errors import ConfigError, DataError, TrainingError
from .model import FusionTransNet, WindowSampler

log = logging.getLogger(__name__)

FRACTIONS = (0.7, 0.2, 0.1)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamWState:
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adamw_step(params: dict[str, T.Tensor], state: AdamWState) -> None:
    """One AdamW update in place; parameters without a gradient are left untouched.

    The decay term uses the pre-update value: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        m = state.first.get(name)
        if m is None:
            m = state.first[name] = np.zeros_like(p.data)
            state.second[name] = np.zeros_like(p.data)
        v = state.second[name]
        t = state.steps[name] = state.steps.get(name, 0) + 1
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = p.data - state.lr * update - state.lr * state.weight_decay * p.data


# ---------------------------------------------------------------- metrics

def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(truth))))


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2)))


@dataclass
class EvalReport:
    per_mode: dict[str, dict[str, float]]
    mae: float
    rmse: float
    ablation: str
    seed: int
    epochs: int = 0
    wall_seconds: float = 0.0
    split: str = "test"
    dumps: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "ablation": self.ablation,
            "variant": VARIANT_NAMES.get(self.ablation, self.ablation),
            "seed": self.seed,
            "split": self.split,
            "epochs": self.epochs,
            "mae": self.mae,
            "rmse": self.rmse,
            "per_mode": self.per_mode,
        }
        if include_timing:
            out["wall_seconds"] = self.wall_seconds
        if self.dumps:
            out["dumps"] = self.dumps
        return out


def score_predictions(
    preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], names: Sequence[str], **meta
) -> EvalReport:
    """MAE/RMSE per mode and pooled over every cell, step and mode."""
    per_mode = {
        name: {"mae": mae(p, t), "rmse": rmse(p, t)} for name, p, t in zip(names, preds, truths)
    }
    flat_p = np.concatenate([np.ravel(p) for p in preds])
    flat_t = np.concatenate([np.ravel(t) for t in truths])
    return EvalReport(per_mode, mae(flat_p, flat_t), rmse(flat_p, flat_t), **meta)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: FusionTransNet
    normalization: NormalizationState
    splits: Splits
    history: list[dict]
    best_epoch: int
    wall_seconds: float


def prepare(dataset: MultiModalDataset, window: int, fractions=FRACTIONS):
    splits = temporal_split(dataset.num_steps, fractions, window)
    scaled, state = max_min_normalize(dataset, fit_steps=splits.train)
    return splits, scaled, state


def predict_steps(
    model: FusionTransNet, sampler: WindowSampler, steps: Sequence[int], batch_size: int = 64
) -> list[np.ndarray]:
    """Normalised predictions, one (S, N, N) array per mode."""
    steps = list(steps)
    chunks = [model.predict(sampler.batch(steps[i:i + batch_size])) for i in range(0, len(steps), batch_size)]
    return [np.concatenate([c[m] for c in chunks]) for m in range(len(model.modes))]


def evaluate(
    model: FusionTransNet,
    dataset: MultiModalDataset,
    normalization: NormalizationState,
    steps: Sequence[int],
    split: str = "test",
    sampler: WindowSampler | None = None,
) -> EvalReport:
    """Denormalised MAE/RMSE of the model on the given target steps."""
    steps = list(steps)
    if not steps:
        raise DataError(f"{split} split has no target steps")
    if sampler is None:
        scaled, _ = max_min_normalize(dataset, normalization)
        sampler = WindowSampler(dataset, scaled, model.config.window)
    preds = predict_steps(model, sampler, steps)
    names = [m.name for m in model.modes]
    preds = [denormalize_od(p, normalization, n) for p, n in zip(preds, names)]
    truths = [dataset.mode(n).flows[steps] for n in names]
    return score_predictions(
        preds, truths, names, ablation=model.config.ablation, seed=model.config.seed, split=split
    )


def training_mse(model: FusionTransNet, sampler: WindowSampler, steps: Sequence[int]) -> float:
    """Plain MSE in normalised space over the given targets, pooled across modes."""
    preds = predict_steps(model, sampler, steps)
    errs = [np.ravel((p - t[list(steps)]) ** 2) for p, t in zip(preds, sampler.targets)]
    return float(np.mean(np.concatenate(errs)))


def train(
    dataset: MultiModalDataset,
    config: ModelConfig,
    fractions: Sequence[float] = FRACTIONS,
    train_targets: Sequence[int] | None = None,
    select_best: bool = True,
) -> TrainResult:
    """Minimise the balanced multimodal loss with AdamW; keep the best validation epoch.

    ``train_targets`` overrides the training target steps (the splits still
    define normalisation and validation). Deterministic for a given seed.
    """
    start = time.perf_counter()
    splits, scaled, state = prepare(dataset, config.window, fractions)
    model = FusionTransNet.for_dataset(config, dataset, splits.train)
    sampler = WindowSampler(dataset, scaled, config.window)
    targets = np.asarray(list(train_targets if train_targets is not None else splits.targets("train", config.window)))
    if targets.size == 0:
        raise DataError("no training targets")
    val_steps = list(splits.targets("val", config.window))
    rng = np.random.default_rng(config.seed + 7919)
    opt = AdamWState(config.learning_rate, config.weight_decay)
    history: list[dict] = []
    best_score, best_epoch, best_state = np.inf, 0, model.state_arrays()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(targets)
        losses = []
        for b, i in enumerate(range(0, len(order), config.batch_size)):
            batch = sampler.batch(order[i:i + config.batch_size])
            model.zero_grad()
            loss = model.loss(batch)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged at epoch {epoch}, step {b}")
            T.backward(loss)
            try:
                adamw_step(model.params, opt)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {b}: {exc}") from None
            losses.append(value)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_steps:
            report = evaluate(model, dataset, state, val_steps, "val", sampler)
            record.update(val_mae=report.mae, val_rmse=report.rmse, val_per_mode=report.per_mode)
            score = report.mae
        else:
            score = record["train_loss"]
        history.append(record)
        log.info("epoch %d: %s", epoch, {k: v for k, v in record.items() if k != "val_per_mode"})
        if not select_best or score < best_score:
            best_score, best_epoch, best_state = score, epoch, model.state_arrays()
    model.load_state_arrays(best_state)
    return TrainResult(model, state, splits, history, best_epoch, time.perf_counter() - start)


def report_on_split(result: TrainResult, dataset: MultiModalDataset, split: str = "test") -> EvalReport:
    steps = result.splits.targets(split, result.model.config.window)
    report = evaluate(result.model, dataset, result.normalization, steps, split)
    report.epochs = result.best_epoch
    report.wall_seconds = result.wall_seconds
    return report


# ---------------------------------------------------------------- baseline

def ha_baseline(
    dataset: MultiModalDataset,
    window: int = 1,
    fractions: Sequence[float] = FRACTIONS,
    split: str = "test",
    train_steps: range | None = None,
) -> EvalReport:
    """Predict every OD cell by its mean over the training steps."""
    splits = temporal_split(dataset.num_steps, fractions, window)
    history = splits.train if train_steps is None else train_steps
    if len(history) == 0:
        raise DataError("historical average needs at least one training step")
    steps = list(splits.targets(split, window))
    if not steps:
        raise DataError(f"{split} split has no target steps")
    names = dataset.mode_names
    preds, truths = [], []
    for s in dataset.series:
        mean_od = s.flows[history.start:history.stop].mean(axis=0)
        preds.append(np.broadcast_to(mean_od, (len(steps),) + mean_od.shape))
        truths.append(s.flows[steps])
    return score_predictions(preds, truths, names, ablation="ha", seed=0, split=split)


# ---------------------------------------------------------------- embedding validation

def first_difference_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation of successive differences (the printed ``POC``)."""
    da, db = np.diff(np.asarray(a, float)), np.diff(np.asarray(b, float))
    denom = np.sqrt((da * da).sum()) * np.sqrt((db * db).sum())
    return float((da * db).sum() / denom) if denom > 0 else float("nan")


def pearson_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Mean-centred correlation (the printed ``FOC``)."""
    ca = np.asarray(a, float) - np.mean(a)
    cb = np.asarray(b, float) - np.mean(b)
    denom = np.sqrt((ca * ca).sum()) * np.sqrt((cb * cb).sum())
    return float((ca * cb).sum() / denom) if denom > 0 else float("nan")


def mean_embeddings(result: TrainResult, dataset: MultiModalDataset, steps: Sequence[int]) -> list[np.ndarray]:
    """Final embeddings U averaged over the windows ending before ``steps``."""
    model = result.model
    scaled, _ = max_min_normalize(dataset, result.normalization)
    sampler = WindowSampler(dataset, scaled, model.config.window)
    steps = list(steps)
    sums = None
    for i in range(0, len(steps), 64):
        out = model.forward(sampler.batch(steps[i:i + 64]))
        part = [u.data.sum(axis=0) for u in out.embeddings]
        sums = part if sums is None else [a + b for a, b in zip(sums, part)]
    return [s / len(steps) for s in sums]


def poc_foc_validation(
    result: TrainResult,
    dataset: MultiModalDataset,
    k_list: Sequence[int] = (5, 10, 15, 20),
    split: str = "test",
) -> list[dict]:
    """Mean inflow-series correlation between each node and its k nearest embedding neighbours.

    Rows carry both printed measures: ``as_printed_poc`` (first differences)
    and ``as_printed_foc`` (mean-centred).
    """
    steps = list(result.splits.targets(split, result.model.config.window))
    if not steps:
        raise DataError(f"{split} split has no target steps")
    embeddings = mean_embeddings(result, dataset, steps)
    smallest = min(e.shape[0] for e in embeddings)
    for k in k_list:
        if k < 1 or k >= smallest:
            raise ConfigError(f"k={k} must lie in [1, {smallest - 1}] for the smallest mode")
    span = slice(steps[0], steps[-1] + 1)
    rows = []
    for k in k_list:
        poc, foc = [], []
        for m, emb in enumerate(embeddings):
            inflow = dataset.series[m].features[span, :, 0]
            dist = np.sqrt(((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1))
            np.fill_diagonal(dist, np.inf)
            for i in range(emb.shape[0]):
                for j in np.argsort(dist[i], kind="stable")[:k]:
                    poc.append(first_difference_correlation(inflow[:, i], inflow[:, j]))
                    foc.append(pearson_correlation(inflow[:, i], inflow[:, j]))
        rows.append({"k": k, "as_printed_poc": float(np.nanmean(poc)), "as_printed_foc": float(np.nanmean(foc))})
    return rows


# ---------------------------------------------------------------- ablation runs

def _run_variant(args) -> dict:
    dataset, config = args
    result = train(dataset, config)
    return report_on_split(result, dataset).to_dict()


def run_ablation(
    dataset: MultiModalDataset,
    base: ModelConfig,
    seeds: Sequence[int],
    tags: Sequence[str] = ("full", "no_od_split", "no_global", "no_local", "no_mpi"),
    jobs: int = 1,
) -> dict:
    """Train every (variant, seed) pair; returns per-variant test MAEs plus the HA baseline."""
    work = [(dataset, base.replace(ablation=tag, seed=seed)) for tag in tags for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_variant, work))
    else:
        reports = [_run_variant(w) for w in work]
    table: dict[str, dict] = {}
    for (_, cfg), rep in zip(work, reports):
        row = table.setdefault(cfg.ablation, {"variant": VARIANT_NAMES[cfg.ablation], "mae": {}, "rmse": {}})
        row["mae"][cfg.seed] = rep["mae"]
        row["rmse"][cfg.seed] = rep["rmse"]
    for row in table.values():
        row["mean_mae"] = float(np.mean(list(row["mae"].values())))
        row["mean_rmse"] = float(np.mean(list(row["rmse"].values())))
    ha = ha_baseline(dataset, base.window)
    return {"variants": table, "ha": {"mae": ha.mae, "rmse": ha.rmse}, "seeds": list(seeds)}
