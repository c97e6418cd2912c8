"""Confusion counts, F-beta family metrics, threshold search and PR curves."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NUM_CLASSES = 28
GRID_SIZE = 1000


def threshold_grid(size: int = GRID_SIZE) -> np.ndarray:
    """``size`` evenly spaced thresholds k / (size - 1), k = 0 .. size - 1."""
    if size < 2:
        raise ValueError("threshold grid needs at least 2 points")
    return np.arange(size, dtype=np.float64) / (size - 1)


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    if pred.ndim != 2:
        raise ValueError(f"expected (N, C) arrays, got shape {pred.shape}")
    return pred, target


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]) if len(self.tp) else 0

    def total(self) -> "ConfusionCounts":
        """Counts summed over classes (as 1-element arrays)."""
        return ConfusionCounts(*(np.array([a.sum()]) for a in (self.tp, self.fp, self.fn, self.tn)))


def confusion_counts(pred, target) -> ConfusionCounts:
    """Per-class TP/FP/FN/TN for 0/1 matrices of shape (N, C)."""
    p, t = _pair(pred, target)
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    tn = p.shape[0] - tp - fp - fn
    return ConfusionCounts(tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64), tn.astype(np.int64))


def f_beta(tp, fp, fn, beta: float = 1.0):
    """((1+b^2) TP) / ((1+b^2) TP + b^2 FN + FP); 0 where the denominator is 0.

    Works elementwise on arrays of counts.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    num = (1 + b2) * tp
    den = num + b2 * fn + fp
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(out) if out.ndim == 0 else out


def per_sample_iou(pred, target) -> np.ndarray:
    """|P & T| / |P | T| per row; a row with both sets empty scores 1."""
    p, t = _pair(pred, target)
    inter = (p & t).sum(axis=1).astype(np.float64)
    union = (p | t).sum(axis=1).astype(np.float64)
    return np.divide(inter, union, out=np.ones_like(inter), where=union > 0)


@dataclass
class MetricsReport:
    per_class_f1: np.ndarray
    macro_f1: float
    precision: float
    recall: float
    binary_accuracy: float
    iou: float
    f_beta: float
    beta: float
    correct_labels: int
    total_labels: int
    header: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        rows = [(k, v) for k, v in self.header.items()]
        rows += [
            ("binary_accuracy", self.binary_accuracy), ("macro_f1", self.macro_f1),
            ("precision", self.precision), ("recall", self.recall), ("iou", self.iou),
            (f"f_beta(beta={self.beta:g})", self.f_beta),
            ("correct_labels", self.correct_labels), ("total_labels", self.total_labels),
        ]
        rows += [(f"f1_class_{c}", float(v)) for c, v in enumerate(self.per_class_f1)]
        return rows

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["key", "value"])
            for k, v in self.rows():
                w.writerow([k, repr(v) if isinstance(v, float) else v])


def binary_accuracy(correct: int, total: int) -> float:
    return correct / total if total else 0.0


def metrics_report(pred, target, beta: float = 1.0, header: dict | None = None) -> MetricsReport:
    """Table-style summary: binary accuracy, macro F1, micro precision/recall, mean IOU."""
    p, t = _pair(pred, target)
    cc = confusion_counts(p, t)
    tp, fp, fn, tn = (int(a.sum()) for a in (cc.tp, cc.fp, cc.fn, cc.tn))
    per_class = f_beta(cc.tp, cc.fp, cc.fn, 1.0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    correct, total = tp + tn, p.size
    return MetricsReport(
        per_class_f1=np.atleast_1d(per_class),
        macro_f1=float(np.mean(per_class)),
        precision=precision,
        recall=recall,
        binary_accuracy=binary_accuracy(correct, total),
        iou=float(per_sample_iou(p, t).mean()) if len(p) else 0.0,
        f_beta=f_beta(tp, fp, fn, beta),
        beta=beta,
        correct_labels=correct,
        total_labels=total,
        header=dict(header or {}),
    )


# ---------------------------------------------------------------------------
# thresholds
# ---------------------------------------------------------------------------

@dataclass
class ThresholdVector:
    values: np.ndarray
    variant: str = "raw"  # raw | smoothed | global

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any((self.values < 0) | (self.values > 1)):
            raise ValueError("thresholds must lie in [0, 1]")


def _f1_over_grid(scores: np.ndarray, target: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """F1 at every grid threshold for one class (score >= t is positive)."""
    order = np.sort(scores)
    pos_scores = np.sort(scores[target])
    n, n_pos = len(order), len(pos_scores)
    # counts of scores >= t via searchsorted on the sorted arrays
    pred_pos = n - np.searchsorted(order, grid, side="left")
    tp = n_pos - np.searchsorted(pos_scores, grid, side="left")
    fp = pred_pos - tp
    fn = n_pos - tp
    return f_beta(tp, fp, fn, 1.0)


def per_class_best_threshold(scores, target, grid: np.ndarray | None = None) -> ThresholdVector:
    """Smallest grid threshold maximizing each class's F1; 0 for classes with no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    target = np.asarray(target).astype(bool)
    if scores.shape != target.shape:
        raise ValueError(f"score shape {scores.shape} differs from target shape {target.shape}")
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    out = np.zeros(scores.shape[1])
    for c in range(scores.shape[1]):
        if not target[:, c].any():
            continue
        f1 = _f1_over_grid(scores[:, c], target[:, c], grid)
        out[c] = grid[int(np.argmax(f1))]  # argmax returns the first (smallest) maximizer
    return ThresholdVector(out, "raw")


def best_global_threshold(scores, target, grid: np.ndarray | None = None) -> float:
    """Single best threshold over the flattened score matrix."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    target = np.asarray(target).astype(bool).reshape(-1)
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if not target.any():
        return 0.0
    return float(grid[int(np.argmax(_f1_over_grid(scores, target, grid)))])


def smooth_thresholds(history: Sequence, k: int = 5) -> ThresholdVector:
    """Per-class mean of the ``k`` most recent raw threshold vectors."""
    if not len(history):
        raise ValueError("threshold history is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    recent = [h.values if isinstance(h, ThresholdVector) else np.asarray(h, dtype=np.float64)
              for h in list(history)[-k:]]
    return ThresholdVector(np.mean(recent, axis=0), "smoothed")


def apply_thresholds(scores, thresholds) -> np.ndarray:
    """1 where score >= threshold (per class vector or one global value)."""
    scores = np.asarray(scores)
    if isinstance(thresholds, ThresholdVector):
        t = thresholds.values
    else:
        t = np.asarray(thresholds, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("thresholds must lie in [0, 1]")
    if t.ndim == 1 and t.shape[0] != scores.shape[1]:
        raise ValueError(f"{t.shape[0]} thresholds for {scores.shape[1]} classes")
    return (scores >= t).astype(np.uint8)


def write_threshold_table(path: str | Path, raw: ThresholdVector, smoothed: ThresholdVector,
                          all_raw: float, all_smoothed: float) -> None:
    """CSV with columns class, raw, smoothed; first row is the "All" row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "raw", "smoothed"])
        w.writerow(["All", repr(float(all_raw)), repr(float(all_smoothed))])
        for c, (r, s) in enumerate(zip(raw.values, smoothed.values)):
            w.writerow([c, repr(float(r)), repr(float(s))])


def read_threshold_table(path: str | Path, column: str = "smoothed") -> ThresholdVector:
    with open(path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["class"] != "All"]
    rows.sort(key=lambda r: int(r["class"]))
    return ThresholdVector([float(r[column]) for r in rows], column)


# ---------------------------------------------------------------------------
# PR curve
# ---------------------------------------------------------------------------

@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "precision", "recall"])
            for row in zip(self.thresholds, self.precision, self.recall):
                w.writerow([repr(float(v)) for v in row])


def pr_curve(scores, target, grid: np.ndarray | None = None) -> PRCurve:
    """Micro precision and recall at each grid threshold.

    Precision is reported as 1 where nothing is predicted positive.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    target = np.asarray(target).astype(bool).reshape(-1)
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    order = np.sort(scores)
    pos = np.sort(scores[target])
    pred_pos = len(order) - np.searchsorted(order, grid, side="left")
    tp = len(pos) - np.searchsorted(pos, grid, side="left")
    precision = np.divide(tp, pred_pos, out=np.ones(len(grid)), where=pred_pos > 0)
    recall = tp / len(pos) if len(pos) else np.zeros(len(grid))
    return PRCurve(grid.copy(), precision, recall.astype(np.float64))
