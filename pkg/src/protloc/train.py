"""Adadelta training loop with plateau LR decay, staged losses, TTA evaluation and early stopping."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .data import _STREAM_AUGMENT, AugmentationPlan, Dataset, augment, make_negative, sample_rng, tta_batch
from .losses import LOSS_COLUMNS, LossSchedule, class_weights_from_labels, focal_terms, total_loss
from .model import Model
from .tensor import Parameter, Tape, _sigmoid, sigmoid

log = logging.getLogger(__name__)

_STREAM_SHUFFLE = 3


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf."""


# ---------------------------------------------------------------------------
# optimizer and LR schedule
# ---------------------------------------------------------------------------

@dataclass
class AdadeltaState:
    rho: float = 0.9
    eps: float = 1e-6
    lr: float = 0.1
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_delta: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def ensure(self, params: Sequence[Parameter]) -> None:
        for p in params:
            if p.name not in self.sq_grad:
                self.sq_grad[p.name] = np.zeros_like(p.data)
                self.sq_delta[p.name] = np.zeros_like(p.data)


def adadelta_step(params: Sequence[Parameter], state: AdadeltaState, step: int | None = None) -> None:
    """One Adadelta update using each parameter's ``.grad``, in place.

    Eg <- rho*Eg + (1-rho)*g^2;  d = -sqrt((Ed + eps) / (Eg + eps)) * g;
    Ed <- rho*Ed + (1-rho)*d^2;  x <- x + lr*d
    """
    state.ensure(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(
                f"non-finite gradient in {p.name} at step {state.steps if step is None else step}")
    rho, eps = state.rho, state.eps
    for p in params:
        g = p.grad
        eg = state.sq_grad[p.name]
        ed = state.sq_delta[p.name]
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -np.sqrt((ed + eps) / (eg + eps)) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        p.data += (state.lr * delta).astype(p.data.dtype, copy=False)
    state.steps += 1


@dataclass
class PlateauState:
    lr: float = 0.1
    patience: int = 200
    factor: float = 0.5
    min_lr: float = 1e-3
    threshold: float = 1e-4
    best: float = math.inf
    since_best: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.lr < self.min_lr:
            raise ValueError("initial lr is below min_lr")


def reduce_on_plateau(state: PlateauState, metric: float) -> float:
    """Track a metric to minimize; halve (by ``factor``) the lr after
    ``patience`` consecutive non-improving calls.  Returns the new lr."""
    if not math.isfinite(metric):
        raise ValueError(f"plateau metric must be finite, got {metric}")
    if metric < state.best - state.threshold:
        state.best = metric
        state.since_best = 0
    else:
        state.since_best += 1
    if state.since_best > state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.since_best = 0
    return state.lr


def early_stop_check(history: Sequence[float], patience: int = 5, delta: float = 1e-3) -> bool:
    """True when the last ``patience`` epochs never beat the earlier best by ``delta``."""
    if not len(history):
        raise ValueError("history is empty")
    if len(history) <= patience:
        return False
    before = max(history[:-patience])
    return max(history[-patience:]) < before + delta


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------

STEP_COLUMNS = ("step", "epoch", "stage", *LOSS_COLUMNS, "total", "lr")
EPOCH_COLUMNS = ("epoch", "macro_f1", "focal", "precision", "recall", "iou", "val_bce", "lr", "step")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        _write_rows(directory / "train_log.csv", STEP_COLUMNS, self.steps)
        _write_rows(directory / "epoch_log.csv", EPOCH_COLUMNS, self.epochs)


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 40
    lr: float = 0.1
    rho: float = 0.9
    adadelta_eps: float = 1e-6
    plateau_patience: int = 200
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-3
    early_stop_patience: int = 5
    early_stop_delta: float = 1e-3
    smoothing_k: int = 5
    grid_size: int = metrics.GRID_SIZE
    eval_batch_size: int = 128
    seed: int = 0
    schedule: LossSchedule = field(default_factory=LossSchedule)
    augmentation: AugmentationPlan = field(default_factory=AugmentationPlan)


def make_batch(ds: Dataset, idx: np.ndarray, plan: AugmentationPlan, seed: int, epoch: int
               ) -> tuple[np.ndarray, np.ndarray]:
    """Augmented images and labels for the samples ``idx`` of ``ds``.

    Each sample draws from its own stream keyed by (seed, epoch, id), so the
    result does not depend on batch composition or processing order.
    """
    images, labels = [], []
    for i in idx:
        s = ds[int(i)]
        rng = sample_rng(seed, _STREAM_AUGMENT, epoch, _id_key(s.id))
        if rng.random() < plan.purple:
            s = make_negative(s, rng)
        s = augment(s, plan, rng)
        images.append(s.image)
        labels.append(s.labels)
    return np.stack(images), np.stack(labels)


def _id_key(sid: str) -> int:
    digits = "".join(ch for ch in sid if ch.isdigit())
    if digits:
        return int(digits)
    return int.from_bytes(sid.encode()[:8].ljust(8, b"\0"), "little")


def train_epoch(model: Model, ds: Dataset, cfg: TrainConfig, opt: AdadeltaState, plateau: PlateauState,
                class_weights: np.ndarray, epoch: int, step: int = 0) -> tuple[list[dict], int]:
    """One pass over ``ds`` in seeded-shuffled batches.  Returns (rows, next step)."""
    if len(ds) == 0:
        raise ValueError("training fold is empty")
    model.train()
    params = model.parameters()
    order = sample_rng(cfg.seed, _STREAM_SHUFFLE, epoch).permutation(len(ds))
    rows = []
    for start in range(0, len(ds), cfg.batch_size):
        idx = order[start: start + cfg.batch_size]
        x, y = make_batch(ds, idx, cfg.augmentation, cfg.seed, epoch)
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            probs = sigmoid(model(x, train=True))
            loss, parts = total_loss(step, epoch, cfg.schedule, probs, y, class_weights)
        tape.backward(loss)
        opt.lr = plateau.lr
        try:
            adadelta_step(params, opt, step)
        except NonFiniteGradientError as e:
            raise NonFiniteGradientError(f"{e} (epoch {epoch}, batch starting at {start})") from None
        rows.append({"step": step, "epoch": epoch, "stage": parts["stage"],
                     **{k: parts[k] for k in LOSS_COLUMNS}, "total": parts["total"], "lr": opt.lr})
        reduce_on_plateau(plateau, parts["soft_f1"])
        step += 1
    return rows, step


def predict_scores(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Single-pass sigmoid scores, eval mode, no tape."""
    out = []
    for s in range(0, len(images), batch_size):
        out.append(_sigmoid(model(images[s: s + batch_size], train=False).data))
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes), dtype=model.dtype)


def evaluate_with_tta(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Mean of sigmoid scores over the four TTA variants, shape (N, classes)."""
    images = np.asarray(images)
    total = None
    for variant in tta_batch(images):
        s = predict_scores(model, np.ascontiguousarray(variant), batch_size).astype(np.float64)
        total = s if total is None else total + s
    return total / 4.0 if total is not None else np.zeros((0, model.cfg.num_classes))


@dataclass
class FitResult:
    log: TrainLog
    raw_thresholds: list[metrics.ThresholdVector]
    smoothed: metrics.ThresholdVector
    epochs_run: int
    stopped_early: bool
    final_scores: np.ndarray
    score_history: list[np.ndarray] = field(default_factory=list)


def fit(model: Model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
        on_epoch_end: Callable[[int, Model, dict], None] | None = None) -> FitResult:
    """Staged training with per-epoch TTA evaluation and threshold tracking.

    Each epoch: train, score ``val_ds`` with TTA, find raw per-class
    thresholds, smooth them over the last ``smoothing_k`` epochs, and record
    macro-F1 at the smoothed thresholds for early stopping.
    """
    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    cfg.schedule.check_boundaries(steps_per_epoch)
    weights = class_weights_from_labels(train_ds.labels)
    opt = AdadeltaState(rho=cfg.rho, eps=cfg.adadelta_eps, lr=cfg.lr)
    plateau = PlateauState(lr=cfg.lr, patience=cfg.plateau_patience, factor=cfg.plateau_factor,
                           min_lr=cfg.min_lr, threshold=cfg.plateau_threshold)
    grid = metrics.threshold_grid(cfg.grid_size)
    tlog = TrainLog()
    raw_hist: list[metrics.ThresholdVector] = []
    f1_hist: list[float] = []
    score_hist: list[np.ndarray] = []
    step = 0
    stopped = False
    scores = np.zeros((len(val_ds), model.cfg.num_classes))
    epoch = -1
    for epoch in range(cfg.max_epochs):
        rows, step = train_epoch(model, train_ds, cfg, opt, plateau, weights, epoch, step)
        tlog.steps.extend(rows)
        scores = evaluate_with_tta(model, val_ds.images, cfg.eval_batch_size)
        raw = metrics.per_class_best_threshold(scores, val_ds.labels, grid)
        raw_hist.append(raw)
        smoothed = metrics.smooth_thresholds(raw_hist, cfg.smoothing_k)
        rep = metrics.metrics_report(metrics.apply_thresholds(scores, smoothed), val_ds.labels)
        focal, _ = focal_terms(scores, val_ds.labels.astype(np.float64),
                               cfg.schedule.focal_gamma, cfg.schedule.focal_alpha)
        val_bce = float(np.mean(-(val_ds.labels * np.log(np.clip(scores, 1e-7, 1))
                                  + (1 - val_ds.labels) * np.log(np.clip(1 - scores, 1e-7, 1)))))
        row = {"epoch": epoch, "macro_f1": rep.macro_f1, "focal": focal, "precision": rep.precision,
               "recall": rep.recall, "iou": rep.iou, "val_bce": val_bce, "lr": plateau.lr, "step": step}
        tlog.epochs.append(row)
        f1_hist.append(rep.macro_f1)
        log.info("epoch %d step %d lr %.4g loss %.4f val macro-F1 %.4f", epoch, step, plateau.lr,
                 rows[-1]["total"], rep.macro_f1)
        score_hist.append(scores)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, {"raw": raw, "smoothed": smoothed, "row": row, "scores": scores,
                                        "stage": rows[-1]["stage"]})
        # warmup epochs are excluded so the untrained early peak cannot end the run
        post_warmup = f1_hist[cfg.schedule.warmup_epochs:]
        if post_warmup and early_stop_check(post_warmup, cfg.early_stop_patience, cfg.early_stop_delta):
            stopped = True
            break
    smoothed = metrics.smooth_thresholds(raw_hist, cfg.smoothing_k) if raw_hist else \
        metrics.ThresholdVector(np.zeros(model.cfg.num_classes), "smoothed")
    return FitResult(tlog, raw_hist, smoothed, epoch + 1, stopped, scores, score_hist)


# ---------------------------------------------------------------------------
# score matrices and throughput
# ---------------------------------------------------------------------------

def write_score_matrix(path: str | Path, ids: Sequence[str], scores: np.ndarray, fmt=float) -> None:
    """CSV with header ``sample_id, c0 .. c{C-1}``, one row per sample."""
    scores = np.asarray(scores)
    if scores.ndim != 2 or len(ids) != scores.shape[0]:
        raise ValueError(f"{len(ids)} ids for a score matrix of shape {scores.shape}")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id"] + [f"c{c}" for c in range(scores.shape[1])])
        for sid, row in zip(ids, scores):
            w.writerow([sid] + [repr(float(v)) if fmt is float else int(v) for v in row])


def read_score_matrix(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "sample_id":
            raise ValueError(f"{path} is not a score matrix (expected a sample_id column)")
        ids, rows = [], []
        for r in reader:
            if len(r) != len(header):
                raise ValueError(f"{path}: row for {r[0] if r else '?'} has {len(r)} fields, expected {len(header)}")
            ids.append(r[0])
            rows.append([float(v) for v in r[1:]])
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)


def measure_throughput(model: Model, images: np.ndarray, batch_sizes: Sequence[int] = (1, 32),
                       n_images: int = 512, warmup: int = 2) -> list[dict]:
    """Single-pass inference timing per batch size.

    ``warmup`` untimed batches run first; then batches are drawn cyclically
    from ``images`` until ``n_images`` have been timed.
    """
    if len(images) == 0:
        raise ValueError("no images to benchmark")
    model.eval()
    rows = []
    for bs in batch_sizes:
        if bs < 1:
            raise ValueError(f"batch size must be >= 1, got {bs}")
        batches = []
        pos = 0
        for _ in range(warmup + math.ceil(n_images / bs)):
            idx = np.arange(pos, pos + bs) % len(images)
            batches.append(np.ascontiguousarray(images[idx]))
            pos += bs
        for b in batches[:warmup]:
            model(b, train=False)
        timed = batches[warmup:]
        start = time.perf_counter()
        for b in timed:
            model(b, train=False)
        seconds = time.perf_counter() - start
        count = sum(len(b) for b in timed)
        rows.append({"batch_size": bs, "images": count, "seconds": seconds,
                     "seconds_per_image": seconds / count, "images_per_minute": 60.0 * count / seconds})
    return rows
