"""Synthetic 4-channel cell images, multi-label stratified folds, augmentation and TTA.

Channel order is (red, green, blue, yellow): red = microtubules, blue =
nucleus, yellow = endoplasmic reticulum, green = protein of interest.  Only
the green channel carries label information.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

NUM_CLASSES = 28
RED, GREEN, BLUE, YELLOW = range(4)
STRUCTURE_CHANNELS = (RED, BLUE, YELLOW)
NOISE_AMPLITUDE = 0.05

# stream tags mixed into per-sample seeds so subsystems never share draws
_STREAM_GENERATE = 1
_STREAM_AUGMENT = 2


def default_marginals(num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Geometric long-tail p_c = 0.4 * 0.8**c, floored at 0.004."""
    return np.maximum(0.4 * 0.8 ** np.arange(num_classes), 0.004)


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream...); order-free across samples."""
    return np.random.default_rng([int(seed), *map(int, stream)])


# ---------------------------------------------------------------------------
# class patterns
# ---------------------------------------------------------------------------

REGIONS = ("nucleoplasm", "nuclear_rim", "perinuclear", "peripheral_cytoplasm",
           "membrane", "microtubules", "nucleoli")
MORPHOLOGIES = ("diffuse", "speckled", "punctate", "polarized")


def class_pattern(c: int) -> tuple[int, int]:
    """(region, morphology) indices of class ``c``.

    Region cycles fastest, so the 28 classes cover every (region, morphology)
    pair exactly once and neighbouring classes never share a region.
    """
    region = c % len(REGIONS)
    return region, (c // len(REGIONS) + region) % len(MORPHOLOGIES)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray  # (4, H, W) float32 in [0, 1]
    labels: np.ndarray  # (28,) uint8 multi-hot
    id: str


@dataclass
class DatasetManifest:
    ids: list[str]
    class_counts: list[int]
    image_size: int
    seed: int | None = None
    marginals: list[float] | None = None
    labels: list[list[int]] = field(default_factory=list)
    patterns: list[list[list[int]]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ids": self.ids, "class_counts": self.class_counts, "image_size": self.image_size,
            "seed": self.seed, "marginals": self.marginals, "labels": self.labels,
            "patterns": self.patterns, "num_samples": len(self.ids),
            "channels": ["red", "green", "blue", "yellow"],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(ids=list(d["ids"]), class_counts=list(d["class_counts"]), image_size=d["image_size"],
                   seed=d.get("seed"), marginals=d.get("marginals"), labels=d.get("labels", []),
                   patterns=d.get("patterns", []))


@dataclass
class Dataset:
    """Images (N, 4, H, W), labels (N, 28) and the manifest describing them."""

    images: np.ndarray
    labels: np.ndarray
    manifest: DatasetManifest

    @property
    def ids(self) -> list[str]:
        return self.manifest.ids

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.labels[i], self.manifest.ids[i])

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        labels = self.labels[idx]
        m = DatasetManifest(
            ids=[self.manifest.ids[i] for i in idx],
            class_counts=labels.sum(axis=0).astype(int).tolist(),
            image_size=self.manifest.image_size, seed=self.manifest.seed,
            marginals=self.manifest.marginals,
            labels=labels.astype(int).tolist(),
            patterns=[self.manifest.patterns[i] for i in idx] if self.manifest.patterns else [],
        )
        return Dataset(self.images[idx], labels, m)


def _draw_cell(size: int, rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray], tuple[float, float]]:
    """Structure channels of one cell plus the boolean mask of every region."""
    img = np.zeros((4, size, size), dtype=np.float64)
    cy, cx = rng.uniform(0.4 * size, 0.6 * size, 2)
    rn = rng.uniform(0.17, 0.21) * size
    rc = rn * rng.uniform(2.0, 2.3)
    yy, xx = np.mgrid[0:size, 0:size]
    d = np.hypot(yy - cy, xx - cx)
    nucleus = d < rn
    cell = d < rc
    img[BLUE] = nucleus * rng.uniform(0.6, 0.9) * (0.85 + 0.15 * rng.random((size, size)))
    # nucleoli show up as dark holes in the nuclear stain
    nucleoli = np.zeros((size, size), dtype=bool)
    for _ in range(2):
        r = rng.uniform(0, rn - 2.5)
        t = rng.uniform(0, 2 * np.pi)
        nucleoli |= np.hypot(yy - (cy + r * np.sin(t)), xx - (cx + r * np.cos(t))) < 1.5
    img[BLUE][nucleoli] *= 0.2
    img[YELLOW] = (cell & ~nucleus) * rng.uniform(0.3, 0.5) * (0.7 + 0.3 * rng.random((size, size)))
    # microtubule strokes: straight rays from the nuclear rim to the cell edge
    rays = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(3, 6)):
        theta = rng.uniform(0, 2 * np.pi)
        for t in np.linspace(rn, rc, int(4 * (rc - rn)) + 2):
            y, x = int(round(cy + t * np.sin(theta))), int(round(cx + t * np.cos(theta)))
            if 0 <= y < size and 0 <= x < size:
                rays[y, x] = True
    img[RED] = rays * rng.uniform(0.4, 0.7)
    mid = (rn + rc) / 2
    regions = [
        nucleus & ~nucleoli & (d < rn - 1.5),
        (d >= rn - 1.5) & (d < rn + 0.5),
        (d >= rn + 0.5) & (d < mid) & ~rays,
        (d >= mid) & (d < rc - 1.5) & ~rays,
        (d >= rc - 1.5) & (d < rc + 0.5),
        rays,
        nucleoli,
    ]
    return img, regions, (cy, cx)


def _render_pattern(region: np.ndarray, morphology: int, rng: np.random.Generator,
                    center: tuple[float, float]) -> np.ndarray:
    """Green-channel signal of one morphology restricted to (or seeded in) a region."""
    out = np.zeros(region.shape)
    if not region.any():
        return out
    if morphology == 0:  # diffuse: flat fill
        out[region] = rng.uniform(0.35, 0.5)
    elif morphology == 1:  # speckled: bright random 30% of the region
        out[region & (rng.random(region.shape) < 0.3)] = rng.uniform(0.8, 1.0)
    elif morphology == 2:  # punctate: three 2x2 dots anchored in the region
        ys, xs = np.nonzero(region)
        for i in rng.choice(len(ys), size=min(3, len(ys)), replace=False):
            y, x = ys[i], xs[i]
            out[max(y - 1, 0):y + 1, max(x - 1, 0):x + 1] = rng.uniform(0.8, 1.0)
    else:  # polarized: one half of the region, split through the cell center
        yy, xx = np.mgrid[0:region.shape[0], 0:region.shape[1]]
        theta = rng.uniform(0, 2 * np.pi)
        half = np.cos(theta) * (yy - center[0]) + np.sin(theta) * (xx - center[1]) > 0
        out[region & half] = rng.uniform(0.6, 0.8)
    return out


def generate_sample(index: int, size: int, marginals: np.ndarray,
                    seed: int) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    """One synthetic image, its labels and the planted patterns [class, region, morphology]."""
    rng = sample_rng(seed, _STREAM_GENERATE, index)
    labels = (rng.random(len(marginals)) < marginals).astype(np.uint8)
    if not labels.any():
        labels = (rng.random(len(marginals)) < marginals).astype(np.uint8)
    img, regions, center = _draw_cell(size, rng)
    green = np.zeros((size, size))
    planted = []
    for c in np.flatnonzero(labels):
        region, morphology = class_pattern(int(c))
        np.maximum(green, _render_pattern(regions[region], morphology, rng, center), out=green)
        planted.append([int(c), region, morphology])
    green += rng.uniform(0.0, NOISE_AMPLITUDE, (size, size))
    img[GREEN] = green
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels, planted


def generate_synthetic_dataset(n: int, size: int = 32, marginals: Sequence[float] | None = None,
                               seed: int = 0) -> Dataset:
    """Deterministic synthetic dataset of ``n`` samples of shape (4, size, size)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    marginals = default_marginals() if marginals is None else np.asarray(marginals, dtype=np.float64)
    if marginals.shape != (NUM_CLASSES,):
        raise ValueError(f"marginals must have {NUM_CLASSES} entries, got shape {marginals.shape}")
    if not np.all((marginals > 0) & (marginals < 1)):
        raise ValueError("marginals must lie strictly inside (0, 1)")
    images = np.empty((n, 4, size, size), dtype=np.float32)
    labels = np.empty((n, NUM_CLASSES), dtype=np.uint8)
    patterns = []
    for i in range(n):
        images[i], labels[i], planted = generate_sample(i, size, marginals, seed)
        patterns.append(planted)
    manifest = DatasetManifest(
        ids=[f"s{i:06d}" for i in range(n)],
        class_counts=labels.sum(axis=0).astype(int).tolist(),
        image_size=size, seed=int(seed), marginals=[float(m) for m in marginals],
        labels=labels.astype(int).tolist(), patterns=patterns,
    )
    return Dataset(images, labels, manifest)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path: str | Path) -> Path:
    """Directory with ``manifest.json`` and ``images/<id>.f32`` raw little-endian blobs."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    for sid, img in zip(ds.ids, ds.images):
        (path / "images" / f"{sid}.f32").write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
    (path / "manifest.json").write_text(json.dumps(ds.manifest.to_dict(), sort_keys=True))
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest = DatasetManifest.from_dict(json.loads((path / "manifest.json").read_text()))
    s = manifest.image_size
    images = np.empty((len(manifest.ids), 4, s, s), dtype=np.float32)
    for i, sid in enumerate(manifest.ids):
        raw = (path / "images" / f"{sid}.f32").read_bytes()
        images[i] = np.frombuffer(raw, dtype="<f4").reshape(4, s, s)
    labels = np.asarray(manifest.labels, dtype=np.uint8).reshape(len(manifest.ids), NUM_CLASSES)
    recount = labels.sum(axis=0).astype(int).tolist()
    if recount != list(manifest.class_counts):
        raise ValueError(f"manifest class_counts disagree with labels in {path}")
    return Dataset(images, labels, manifest)


# ---------------------------------------------------------------------------
# stratified k-fold
# ---------------------------------------------------------------------------

@dataclass
class FoldAssignment:
    k: int
    folds: np.ndarray  # fold index per sample
    ids: list[str] | None = None

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.folds, minlength=self.k)

    def distribution(self, labels: np.ndarray) -> np.ndarray:
        """Per-fold per-class positive counts, shape (k, num_classes)."""
        labels = np.asarray(labels)
        return np.stack([labels[self.folds == j].sum(axis=0) for j in range(self.k)]).astype(int)

    def write_csv(self, path: str | Path) -> None:
        ids = self.ids or [str(i) for i in range(len(self.folds))]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "fold"])
            for sid, fold in zip(ids, self.folds):
                w.writerow([sid, int(fold)])

    @classmethod
    def read_csv(cls, path: str | Path, k: int | None = None) -> "FoldAssignment":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        folds = np.array([int(r["fold"]) for r in rows], dtype=int)
        return cls(k or int(folds.max()) + 1, folds, [r["sample_id"] for r in rows])


def stratified_kfold(labels: np.ndarray, k: int, seed: int = 0, ids: list[str] | None = None) -> FoldAssignment:
    """Iterative stratification for multi-label data.

    Repeatedly takes the label with the fewest unassigned positives and
    sends each of its samples to the fold that still needs that label most;
    ties go to the fold with the most free capacity, then to a seeded random
    choice.  Fold sizes are capped at ceil(n / k) so they stay balanced, and
    a swap-based repair pass then pulls every class with at least ``k``
    positives to within one of its proportional share per fold.
    """
    labels = np.asarray(labels).astype(bool)
    n, n_labels = labels.shape
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples n={n}")
    rng = np.random.default_rng(seed)
    capacity = np.full(k, n // k, dtype=float)
    capacity[rng.permutation(k)[: n % k]] += 1
    need = np.outer(np.ones(k), labels.sum(axis=0)) / k  # (k, L) desired positives
    folds = np.full(n, -1, dtype=int)
    remaining = labels.copy()
    unassigned = np.ones(n, dtype=bool)

    def pick(candidates: np.ndarray) -> int:
        best = candidates[capacity[candidates] == capacity[candidates].max()]
        return int(best[0] if len(best) == 1 else rng.choice(best))

    while True:
        counts = remaining[unassigned].sum(axis=0)
        active = np.flatnonzero(counts > 0)
        if active.size == 0:
            break
        lab = active[np.argmin(counts[active])]
        members = np.flatnonzero(unassigned & remaining[:, lab])
        for i in rng.permutation(members):
            open_ = np.flatnonzero(capacity > 0)
            col = need[open_, lab]
            cand = open_[col == col.max()]
            j = pick(cand)
            folds[i] = j
            unassigned[i] = False
            capacity[j] -= 1
            need[j] -= labels[i]
    for i in rng.permutation(np.flatnonzero(unassigned)):
        j = pick(np.flatnonzero(capacity > 0))
        folds[i] = j
        capacity[j] -= 1
    _repair_folds(labels, folds, k)
    return FoldAssignment(k, folds, ids)


def _fold_penalty(excess: np.ndarray, hard: np.ndarray) -> np.ndarray:
    # steep cost beyond the +/-1 band on classes with >= k positives, quadratic pull elsewhere
    over = np.maximum(np.abs(excess) - 1.0, 0.0)
    return (1e3 * over * hard + excess ** 2).sum(axis=-1)


def _repair_folds(labels: np.ndarray, folds: np.ndarray, k: int, max_swaps: int = 10_000) -> None:
    """Pairwise sample swaps between folds until every class with >= k
    positives sits within +/-1 of its proportional share per fold.

    Greedy order can leave frequent labels lopsided; swaps keep fold sizes
    fixed.  Modifies ``folds`` in place.
    """
    lab = labels.astype(float)
    share = lab.sum(axis=0) / k
    hard = lab.sum(axis=0) >= k
    dist = np.stack([lab[folds == j].sum(axis=0) for j in range(k)])
    for _ in range(max_swaps):
        excess = dist - share
        viol = np.where(hard, np.abs(excess) - 1.0, 0.0)
        if viol.max() <= 1e-9:
            return
        improved = False
        for flat in np.argsort(-viol, axis=None, kind="stable"):
            f, c = divmod(int(flat), lab.shape[1])
            if viol[f, c] <= 1e-9:
                break
            sign = 1.0 if excess[f, c] > 0 else -1.0
            # out of f: samples whose class-c indicator moves f toward its share
            a_idx = np.flatnonzero((folds == f) & (labels[:, c] == (sign > 0)))
            best = (0.0, -1, -1)
            base_f = _fold_penalty(excess[f], hard)
            for g in range(k):
                if g == f:
                    continue
                b_idx = np.flatnonzero((folds == g) & (labels[:, c] != (sign > 0)))
                if not len(a_idx) or not len(b_idx):
                    continue
                diff = lab[b_idx][None, :, :] - lab[a_idx][:, None, :]
                delta = (_fold_penalty(excess[f] + diff, hard) - base_f
                         + _fold_penalty(excess[g] - diff, hard) - _fold_penalty(excess[g], hard))
                ai, bi = np.unravel_index(int(np.argmin(delta)), delta.shape)
                if delta[ai, bi] < best[0] - 1e-9:
                    best = (float(delta[ai, bi]), int(a_idx[ai]), int(b_idx[bi]))
            if best[1] >= 0:
                a, b = best[1], best[2]
                g = folds[b]
                folds[a], folds[b] = g, f
                dist[f] += lab[b] - lab[a]
                dist[g] += lab[a] - lab[b]
                improved = True
                break
        if not improved:
            return


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

FAMILY_ORDER = ("blue", "orange", "red", "green")

DEFAULT_OPS = {
    "blue": ("erase", "crop_resize"),
    "orange": ("rot90", "rot180", "rot270", "hflip", "vflip", "shift"),
    "red": ("brightness", "contrast", "gamma"),
    "green": ("unsharp",),
}


@dataclass
class AugmentationPlan:
    """Per-family op lists and application probabilities.

    Families run in the fixed order blue (pixel removal), orange (geometry),
    red (value adjustment), green (sharpening); at most one op per family.
    ``purple`` is the rate at which training swaps in a negative sample.
    """

    probabilities: dict[str, float] = field(
        default_factory=lambda: {"blue": 0.5, "orange": 0.5, "red": 0.5, "green": 0.5})
    ops: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_OPS))
    purple: float = 0.05
    max_erase_area: float = 0.25
    min_crop_area: float = 0.75
    max_shift: float = 0.10
    brightness: float = 0.20
    contrast: float = 0.20
    gamma_range: tuple[float, float] = (0.8, 1.25)
    unsharp_strength: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        for fam, p in list(self.probabilities.items()) + [("purple", self.purple)]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {fam} must be in [0, 1], got {p}")
        for fam in FAMILY_ORDER:
            for op in self.ops.get(fam, ()):
                if op not in _OPS:
                    raise ValueError(f"unknown augmentation op {op!r} in family {fam}")

    @classmethod
    def disabled(cls) -> "AugmentationPlan":
        return cls(probabilities={f: 0.0 for f in FAMILY_ORDER}, purple=0.0)


def _erase(img, rng, plan):
    _, h, w = img.shape
    area = rng.uniform(0.02, plan.max_erase_area) * h * w
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    eh = int(min(h, max(1, round(np.sqrt(area * aspect)))))
    ew = int(min(w, max(1, area // eh)))
    y, x = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
    out = img.copy()
    out[:, y: y + eh, x: x + ew] = 0.0
    return out


def _crop_resize(img, rng, plan):
    _, h, w = img.shape
    frac = np.sqrt(rng.uniform(plan.min_crop_area, 1.0))
    ch, cw = max(2, int(round(h * frac))), max(2, int(round(w * frac)))
    y0, x0 = rng.integers(0, h - ch + 1), rng.integers(0, w - cw + 1)
    yy = np.linspace(y0, y0 + ch - 1, h)
    xx = np.linspace(x0, x0 + cw - 1, w)
    grid = np.meshgrid(yy, xx, indexing="ij")
    return np.stack([ndimage.map_coordinates(c, grid, order=1, mode="nearest") for c in img])


def _shift(img, rng, plan):
    _, h, w = img.shape
    dy = int(rng.integers(-int(plan.max_shift * h), int(plan.max_shift * h) + 1))
    dx = int(rng.integers(-int(plan.max_shift * w), int(plan.max_shift * w) + 1))
    out = np.zeros_like(img)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def _brightness(img, rng, plan):
    return img * (1.0 + rng.uniform(-plan.brightness, plan.brightness))


def _contrast(img, rng, plan):
    mean = img.mean(axis=(1, 2), keepdims=True)
    return (img - mean) * (1.0 + rng.uniform(-plan.contrast, plan.contrast)) + mean


def _gamma(img, rng, plan):
    lo, hi = plan.gamma_range
    g = np.exp(rng.uniform(np.log(lo), np.log(hi)))
    return np.power(np.clip(img, 0.0, 1.0), g)


def _unsharp(img, rng, plan):
    s = rng.uniform(*plan.unsharp_strength)
    blur = np.stack([ndimage.gaussian_filter(c, sigma=1.0, mode="nearest") for c in img])
    return img + s * (img - blur)


_OPS = {
    "erase": _erase,
    "crop_resize": _crop_resize,
    "rot90": lambda img, rng, plan: np.rot90(img, 1, axes=(1, 2)),
    "rot180": lambda img, rng, plan: np.rot90(img, 2, axes=(1, 2)),
    "rot270": lambda img, rng, plan: np.rot90(img, 3, axes=(1, 2)),
    "hflip": lambda img, rng, plan: img[:, :, ::-1],
    "vflip": lambda img, rng, plan: img[:, ::-1, :],
    "shift": _shift,
    "brightness": _brightness,
    "contrast": _contrast,
    "gamma": _gamma,
    "unsharp": _unsharp,
}


def apply_op(image: np.ndarray, op: str, rng: np.random.Generator | None = None,
             plan: AugmentationPlan | None = None) -> np.ndarray:
    """Apply one named op to a (4, H, W) image and clamp to [0, 1]."""
    out = _OPS[op](image, rng if rng is not None else np.random.default_rng(0), plan or AugmentationPlan())
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def choose_ops(plan: AugmentationPlan, rng: np.random.Generator) -> list[tuple[str, str]]:
    """Draw the (family, op) pairs for one application of ``plan``."""
    chosen = []
    for fam in FAMILY_ORDER:
        ops = plan.ops.get(fam, ())
        # both draws are always taken so the stream layout is plan-independent
        u = rng.random()
        k = rng.integers(0, max(len(ops), 1))
        if ops and u < plan.probabilities.get(fam, 0.0):
            chosen.append((fam, ops[k]))
    return chosen


def augment(sample: Sample, plan: AugmentationPlan, rng: np.random.Generator) -> Sample:
    """Random augmentation; labels are never touched and shape is preserved."""
    img = sample.image
    for _, op in choose_ops(plan, rng):
        img = _OPS[op](img, rng, plan)
    img = np.ascontiguousarray(np.clip(img, 0.0, 1.0), dtype=sample.image.dtype)
    return Sample(img, sample.labels, sample.id)


def make_negative(sample: Sample, rng: np.random.Generator) -> Sample:
    """Replace the protein channel with faint noise and clear every label."""
    img = sample.image.copy()
    img[GREEN] = rng.uniform(0.0, NOISE_AMPLITUDE, img[GREEN].shape)
    return Sample(img, np.zeros_like(sample.labels), sample.id)


def tta_variants(image: np.ndarray) -> list[np.ndarray]:
    """[identity, horizontal flip, vertical flip, 180-degree rotation] of a (C, H, W) image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ValueError(f"TTA needs a square (C, H, W) image, got shape {image.shape}")
    return [image, image[:, :, ::-1], image[:, ::-1, :], image[:, ::-1, ::-1]]


def tta_batch(images: np.ndarray) -> list[np.ndarray]:
    """The four TTA variants of a whole (N, C, H, W) batch, same order as :func:`tta_variants`."""
    if images.shape[2] != images.shape[3]:
        raise ValueError(f"TTA needs square images, got shape {images.shape}")
    return [images, images[:, :, :, ::-1], images[:, :, ::-1, :], images[:, :, ::-1, ::-1]]
