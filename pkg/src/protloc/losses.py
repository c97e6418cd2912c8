"""Multi-label losses and the staged schedule that combines them.

Each loss takes probabilities ``p`` (a Tensor, N x C) and a 0/1 target
array ``y`` of the same shape, and returns a scalar Tensor recorded on the
active tape.  The ``*_terms`` helpers return ``(value, dvalue/dp)`` as plain
numpy so several losses can share one tape record.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, custom_op

CLAMP_EPS = 1e-7
SOFT_F1_EPS = 1e-7


def _check(p: Tensor, y) -> tuple[np.ndarray, np.ndarray]:
    pd = p.data if isinstance(p, Tensor) else np.asarray(p)
    yd = np.asarray(y, dtype=pd.dtype)
    if pd.shape != yd.shape:
        raise ShapeError(f"probabilities {pd.shape} and targets {yd.shape} differ in shape")
    if pd.ndim != 2:
        raise ShapeError(f"expected (N, C) inputs, got shape {pd.shape}")
    return pd, yd


def _clamped(pd):
    # gradients are taken at the clamped point and passed straight through, so
    # a saturated wrong prediction (p == 1.0 in float32) still gets pushed back
    return np.clip(pd, CLAMP_EPS, 1 - CLAMP_EPS)


def bce_terms(pd: np.ndarray, yd: np.ndarray, weights: np.ndarray | None = None):
    pc = _clamped(pd)
    w = 1.0 if weights is None else weights.reshape(1, -1)
    m = pd.size
    value = -(w * yd * np.log(pc) + (1 - yd) * np.log1p(-pc)).sum() / m
    grad = (-w * yd / pc + (1 - yd) / (1 - pc)) / m
    return float(value), grad.astype(pd.dtype, copy=False)


def soft_f1_terms(pd: np.ndarray, yd: np.ndarray):
    # 2*sTP + sFN + sFP collapses to sum(p) + sum(y)
    num = 2 * (pd * yd).sum(axis=0) + SOFT_F1_EPS
    den = pd.sum(axis=0) + yd.sum(axis=0) + SOFT_F1_EPS
    f1 = num / den
    value = 1.0 - f1.mean()
    c = pd.shape[1]
    grad = -(2 * yd * den - num) / (den * den) / c
    return float(value), grad.astype(pd.dtype, copy=False)


def focal_terms(pd: np.ndarray, yd: np.ndarray, gamma: float = 2.0, alpha: float = 0.25):
    pc = _clamped(pd)
    m = pd.size
    lp, l1p = np.log(pc), np.log1p(-pc)
    q = 1 - pc
    pos = alpha * yd * q ** gamma * lp
    neg = (1 - alpha) * (1 - yd) * pc ** gamma * l1p
    value = -(pos + neg).sum() / m
    if gamma == 0:
        dpos = 1 / pc
        dneg = -1 / q
    else:
        dpos = -gamma * q ** (gamma - 1) * lp + q ** gamma / pc
        dneg = gamma * pc ** (gamma - 1) * l1p - pc ** gamma / q
    grad = -(alpha * yd * dpos + (1 - alpha) * (1 - yd) * dneg) / m
    return float(value), grad.astype(pd.dtype, copy=False)


def _as_op(p: Tensor, value: float, grad: np.ndarray) -> Tensor:
    def backward(gout):
        p._accumulate(gout * grad, owned=True)

    return custom_op(np.asarray(value, dtype=p.data.dtype), [p], backward)


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy over all N*C elements, p clamped to [1e-7, 1 - 1e-7]."""
    pd, yd = _check(p, y)
    return _as_op(p, *bce_terms(pd, yd))


def weighted_bce_loss(p: Tensor, y, class_weights) -> Tensor:
    """BCE with a per-class multiplier on the positive term."""
    pd, yd = _check(p, y)
    w = np.asarray(class_weights, dtype=pd.dtype)
    if w.shape != (pd.shape[1],):
        raise ShapeError(f"class weights must have shape ({pd.shape[1]},), got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("class weights must be finite and positive")
    return _as_op(p, *bce_terms(pd, yd, w))


def soft_f1_loss(p: Tensor, y) -> Tensor:
    """1 - mean over classes of the batch-level soft F1.

    Soft counts: sTP = sum p*y, sFP = sum p*(1-y), sFN = sum (1-p)*y;
    F1_c = (2 sTP + eps) / (2 sTP + sFN + sFP + eps), so a class with no
    positives and no predicted mass scores 1.
    """
    pd, yd = _check(p, y)
    return _as_op(p, *soft_f1_terms(pd, yd))


def focal_loss(p: Tensor, y, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    pd, yd = _check(p, y)
    return _as_op(p, *focal_terms(pd, yd, gamma, alpha))


def class_weights_from_labels(labels: np.ndarray, lo: float = 0.5, hi: float = 10.0) -> np.ndarray:
    """w_c = clamp(N / (C * n_c), lo, hi); classes with no positives get ``hi``."""
    labels = np.asarray(labels)
    n, c = labels.shape
    counts = labels.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, n / (c * np.maximum(counts, 1)), hi)
    return np.clip(w, lo, hi)


@dataclass(frozen=True)
class LossSchedule:
    """Three stages: plain BCE warmup, then weighted BCE + soft F1, then a
    rescaled mix once ``rescale_step`` is reached."""

    warmup_epochs: int = 10
    rescale_step: int = 1000
    a_bce: float = 1.0
    a_f1: float = 1.0
    a_bce_rescaled: float = 2.0
    a_f1_rescaled: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        coeffs = (self.a_bce, self.a_f1, self.a_bce_rescaled, self.a_f1_rescaled)
        if min(coeffs) < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.warmup_epochs < 0 or self.rescale_step < 0:
            raise ValueError("schedule boundaries must be >= 0")

    def check_boundaries(self, steps_per_epoch: int) -> None:
        if self.warmup_epochs * steps_per_epoch > self.rescale_step:
            raise ValueError(
                f"warmup ends at step {self.warmup_epochs * steps_per_epoch}, after rescale_step {self.rescale_step}")

    def stage(self, step: int, epoch: int) -> int:
        if epoch < self.warmup_epochs:
            return 1
        return 3 if step >= self.rescale_step else 2

    def coefficients(self, stage: int) -> dict[str, float]:
        if stage == 1:
            return {"bce": 1.0}
        if stage == 2:
            return {"weighted_bce": self.a_bce, "soft_f1": self.a_f1}
        return {"weighted_bce": self.a_bce_rescaled, "soft_f1": self.a_f1_rescaled}


LOSS_COLUMNS = ("bce", "weighted_bce", "soft_f1", "focal")


def total_loss(step: int, epoch: int, schedule: LossSchedule, p: Tensor, y, class_weights
               ) -> tuple[Tensor, dict[str, float]]:
    """Staged backprop loss plus every tracked component.

    Returns ``(total, log)`` where ``log`` has the four component values,
    ``total`` and ``stage``.  Only the stage's components feed the gradient.
    """
    pd, yd = _check(p, y)
    w = np.asarray(class_weights, dtype=pd.dtype)
    terms = {
        "bce": bce_terms(pd, yd),
        "weighted_bce": bce_terms(pd, yd, w),
        "soft_f1": soft_f1_terms(pd, yd),
        "focal": focal_terms(pd, yd, schedule.focal_gamma, schedule.focal_alpha),
    }
    stage = schedule.stage(step, epoch)
    coeffs = schedule.coefficients(stage)
    value = sum(a * terms[k][0] for k, a in coeffs.items())
    grad = sum(a * terms[k][1] for k, a in coeffs.items())
    log = {k: terms[k][0] for k in LOSS_COLUMNS}
    log["total"] = float(value)
    log["stage"] = stage
    return _as_op(p, value, np.asarray(grad, dtype=pd.dtype)), log
