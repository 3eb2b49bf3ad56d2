"""Loss, optimiser, metric, cross-validation driver and fold ensembling."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (FoldPlan, TrialSet, class_weights, oversample_weights, subject_chunk_batches)
from .models import Model, ModelConfig, build_model, forward, predict_subjects, save_checkpoint
from .rng import stream
from .tensor import Tensor, log_softmax

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    weight_decay: float = 1e-3
    dropout_p: float = 0.25
    label_smoothing: float = 0.0
    class_weights: list[float] | None = None
    merge_groups: list[list[int]] = field(default_factory=list)
    seed: int = 0
    subjects_per_batch: int = 4
    trials_per_subject: int = 16
    batches_per_epoch: int | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def sleep_train_config(**overrides) -> TrainConfig:
    cfg = dict(epochs=15, lr=1e-3, weight_decay=1e-3, dropout_p=0.25, label_smoothing=0.0)
    cfg.update(overrides)
    return TrainConfig(**cfg)


def mi_train_config(**overrides) -> TrainConfig:
    # feet (2) and rest (3) form one logical class at evaluation time
    cfg = dict(epochs=200, lr=5e-4, weight_decay=1e-3, dropout_p=0.25, label_smoothing=0.1,
               merge_groups=[[2, 3]])
    cfg.update(overrides)
    return TrainConfig(**cfg)


# -- loss and metrics --------------------------------------------------------

def cross_entropy(logits: Tensor, targets, class_weights=None, smoothing: float = 0.0) -> Tensor:
    """Class-weighted, label-smoothed cross-entropy (weighted mean over the batch)."""
    targets = np.asarray(targets, dtype=np.int64)
    B, C = logits.shape
    if targets.shape != (B,):
        raise ValueError(f"{targets.shape[0]} targets for {B} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise IndexError(f"target out of range [0, {C})")
    q = np.full((B, C), smoothing / C)
    q[np.arange(B), targets] += 1.0 - smoothing
    w = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    sample_w = w[targets]
    per_sample = -(log_softmax(logits) * q).sum(axis=1)
    return (per_sample * sample_w).sum() / sample_w.sum()


def uar(preds, labels, n_classes: int, ignore_absent: bool = False) -> float:
    """Unweighted average recall: the mean of per-class recalls."""
    return float(np.mean(per_class_recall(preds, labels, n_classes, ignore_absent)))


def per_class_recall(preds, labels, n_classes: int, ignore_absent: bool = False) -> list[float]:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or labels.size == 0:
        raise MetricError(f"need equal, non-empty prediction and label arrays ({preds.shape} vs {labels.shape})")
    recalls = []
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            if ignore_absent:
                continue
            raise MetricError(f"class {c} absent from labels; recall undefined")
        recalls.append(float(np.mean(preds[mask] == c)))
    return recalls


def combine_four_to_three(logits) -> np.ndarray:
    """(left, right, feet, rest) -> (left, right, feet-or-rest) by log-sum-exp."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if logits.shape[-1] != 4:
        raise ValueError(f"expected 4 class logits, got {logits.shape[-1]}")
    merged = np.logaddexp(logits[..., 2], logits[..., 3])
    return np.concatenate([logits[..., :2], merged[..., None]], axis=-1)


def ensemble_logits(per_fold: Sequence) -> np.ndarray:
    """Arithmetic mean of fold logits, summed in fold order."""
    arrays = [np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in per_fold]
    if not arrays:
        raise ValueError("no fold logits to ensemble")
    total = np.zeros_like(arrays[0])
    for a in arrays:
        if a.shape != total.shape:
            raise ValueError(f"fold logits shape {a.shape} != {total.shape}")
        total = total + a
    return total / len(arrays)


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, weight_decay: float = 0.0, names: Sequence[str] | None = None) -> None:
    """One in-place Adam update with L2 decay folded into the gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise TrainingError(f"non-finite gradient in parameter {name}")
        if weight_decay:
            g = g + weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


# -- training ----------------------------------------------------------------

def expected_class_mass(sets: Sequence[TrialSet], weights: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.concatenate([s.labels for s in sets])
    return np.bincount(labels, weights=weights, minlength=n_classes)[:n_classes]


def train_model(sets: Sequence[TrialSet], model_config: ModelConfig, train_config: TrainConfig,
                weights=None, seed: int | None = None, on_epoch=None) -> Model:
    """Train a fresh model on ``sets`` (one head per dataset id)."""
    train_config.validate()
    seed = train_config.seed if seed is None else seed
    cfg = dataclasses.replace(model_config, dropout_p=train_config.dropout_p)
    model = build_model(cfg, seed)
    total = sum(len(s) for s in sets)
    if weights is None:
        weights = oversample_weights(0, total) if total else None
    cw = train_config.class_weights
    if cw is None:
        mass = expected_class_mass(sets, weights.weight, cfg.classes_per_head)
        cw = class_weights(mass, train_config.merge_groups)
    params = model.parameters()
    names = [n for n, _, trainable in model._state if trainable]
    state = AdamState.for_params(params)
    for epoch in range(train_config.epochs):
        drop_rng = stream(seed, "dropout", epoch)
        losses = []
        for batch in subject_chunk_batches(sets, train_config.subjects_per_batch,
                                           train_config.trials_per_subject, weights, seed, epoch,
                                           train_config.batches_per_epoch):
            logits = forward(model, batch.chunk, batch.boundaries, batch.head, "train", drop_rng)
            loss = cross_entropy(logits, batch.labels, cw, train_config.label_smoothing)
            model.zero_grad()
            loss.backward()
            adam_step(params, [p.grad for p in params], state, train_config.lr,
                      train_config.weight_decay, names)
            losses.append(loss.item())
        log.debug("seed %s epoch %d loss %.4f", seed, epoch, float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)))
    return model


@dataclass
class FoldResult:
    fold: int
    seed: int
    uar: float
    val_indices: list[int]
    val_logits: list[list[float]]
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CVResult:
    folds: list[FoldResult]
    test_logits: np.ndarray | None = None
    models: list[Model] = field(default_factory=list, repr=False)

    @property
    def uars(self) -> list[float]:
        return [f.uar for f in self.folds]


def fold_seed(seed: int, fold: int) -> int:
    return int(seed) * 1000 + int(fold)


def _split_calibration(calib: TrialSet, plan: FoldPlan, fold_index: int):
    fold = plan.folds[fold_index]
    if plan.kind == "subjects":
        train_idx = np.flatnonzero(np.isin(calib.subject_ids, fold.train))
        val_idx = np.flatnonzero(np.isin(calib.subject_ids, fold.val))
    else:
        train_idx = np.asarray(fold.train, dtype=np.int64)
        val_idx = np.asarray(fold.val, dtype=np.int64)
    if val_idx.size == 0:
        raise ValueError(f"fold {fold_index} has an empty validation set")
    return train_idx, val_idx


def run_fold(fold_index: int, source: Sequence[TrialSet], calib: TrialSet, plan: FoldPlan,
             model_config: ModelConfig, train_config: TrainConfig, out_dir=None):
    try:
        train_idx, val_idx = _split_calibration(calib, plan, fold_index)
        sets = list(source)
        source_n = sum(len(s) for s in sets)
        if train_idx.size:
            sets.append(calib.subset(train_idx))
        weights = oversample_weights(source_n, int(train_idx.size)) if train_idx.size else \
            oversample_weights(0, source_n)
        seed = fold_seed(train_config.seed, fold_index)
        model = train_model(sets, model_config, train_config, weights, seed)
        val = calib.subset(val_idx)
        logits = predict_subjects(model, val.data, val.subject_ids, calib.dataset_id)
        score = uar(logits.argmax(axis=1), val.labels, model.config.classes_per_head, ignore_absent=True)
        ckpt = None
        if out_dir is not None:
            ckpt = f"fold_{fold_index:02d}.naln"
            save_checkpoint(model, Path(out_dir) / ckpt)
        log.info("fold %d: val UAR %.4f", fold_index, score)
        result = FoldResult(fold=fold_index, seed=seed, uar=score, val_indices=[int(i) for i in val_idx],
                            val_logits=logits.tolist(), checkpoint=ckpt)
        return result, model
    except Exception as exc:
        raise TrainingError(f"fold {fold_index} failed: {exc}") from exc


def run_cv(source: Sequence[TrialSet], calib: TrialSet, fold_plan: FoldPlan, model_config: ModelConfig,
           train_config: TrainConfig, test: TrialSet | None = None, out_dir=None, jobs: int = 1) -> CVResult:
    """Train one model per fold, score it on the held-out calibration part,
    and average the fold models' logits on ``test`` if given."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    args = (source, calib, fold_plan, model_config, train_config, out_dir)
    indices = range(len(fold_plan))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda i: run_fold(i, *args), indices))
    else:
        outcomes = [run_fold(i, *args) for i in indices]
    folds = [r for r, _ in outcomes]
    models = [m for _, m in outcomes]
    result = CVResult(folds=folds, models=models)
    if test is not None:
        head = test.dataset_id
        result.test_logits = ensemble_logits(
            [predict_subjects(m, test.data, test.subject_ids, head) for m in models])
    if out_dir is not None:
        write_fold_results(folds, Path(out_dir) / "fold_results.json")
        if result.test_logits is not None:
            Path(out_dir, "ensemble_predictions.csv").write_text(predictions_csv(result.test_logits))
    return result


def write_fold_results(folds: Sequence[FoldResult], path) -> None:
    payload = {"folds": [f.to_dict() for f in folds],
               "mean_uar": float(np.mean([f.uar for f in folds])),
               "std_uar": float(np.std([f.uar for f in folds]))}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def predictions_csv(logits: np.ndarray) -> str:
    logits = np.asarray(logits)
    buf = io.StringIO()
    n_cls = logits.shape[1]
    buf.write(",".join(["trial_index"] + [f"logit_{c}" for c in range(n_cls)] + ["pred"]) + "\n")
    for i, row in enumerate(logits):
        buf.write(",".join([str(i)] + [repr(float(v)) for v in row] + [str(int(np.argmax(row)))]) + "\n")
    return buf.getvalue()


def read_predictions_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (trial_index, logits, pred)."""
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    if header[0] != "trial_index" or header[-1] != "pred":
        raise ValueError(f"unexpected prediction header {lines[0]!r}")
    rows = [line.split(",") for line in lines[1:]]
    idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    logits = np.array([[float(v) for v in r[1:-1]] for r in rows]).reshape(len(rows), len(header) - 2)
    pred = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return idx, logits, pred
