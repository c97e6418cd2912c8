"""Flat run configuration: defaults, ``key = value`` files and flag overrides.

A config file holds one ``key = value`` pair per line.  Values are parsed as
JSON when possible (numbers, booleans, lists, quoted strings) and fall back
to the raw text, so paths can be written unquoted.  ``#`` starts a comment.

Resolution order is flags > file > defaults.  Every command writes the fully
resolved document next to its outputs as ``config.txt``, and feeding that
file back reproduces the run.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .data import AugmentationPlan
from .losses import LossSchedule
from .model import BlockConfig, NetworkConfig, SEConfig, StemConfig
from .train import TrainConfig

OUTPUT_ROOT_ENV = "PROTLOC_OUTPUT_ROOT"
CONFIG_FILENAME = "config.txt"


class ConfigKeyError(KeyError):
    """A config document named a key that RunConfig does not define."""


def derive_seed(root: int, purpose: str) -> int:
    """Stable 32-bit seed for one purpose (``"init"``, ``"train"``, ...) from the root seed."""
    digest = hashlib.sha256(f"{int(root)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RunConfig:
    # randomness and paths
    seed: int = 0
    output_root: str = "runs"
    # synthetic data
    n: int = 2000
    image_size: int = 32
    data_seed: int = 7
    k: int = 5
    fold: int = 0
    # architecture; each stage is [in, bottleneck, out, cardinality, stride, repeats]
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stages: list = field(default_factory=lambda: [[16, 16, 32, 4, 2, 2], [32, 32, 64, 4, 2, 2]])
    se_reduction: int = 4
    # staged loss
    warmup_epochs: int = 10
    rescale_step: int = 1000
    a_bce: float = 1.0
    a_f1: float = 1.0
    a_bce_rescaled: float = 2.0
    a_f1_rescaled: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # optimizer and schedule
    lr: float = 0.1
    rho: float = 0.9
    adadelta_eps: float = 1e-6
    plateau_patience: int = 200
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-3
    # loop
    batch_size: int = 32
    max_epochs: int = 40
    early_stop_patience: int = 5
    early_stop_delta: float = 1e-3
    eval_batch_size: int = 128
    augment: bool = True
    purple: float = 0.05
    # post-processing
    grid_size: int = 1000
    smoothing_k: int = 5

    # ---- derived views -------------------------------------------------

    def network_config(self) -> NetworkConfig:
        stages = []
        for st in self.stages:
            if len(st) != 6:
                raise ValueError(f"stage entries need 6 integers [in, bottleneck, out, cardinality, stride, "
                                 f"repeats], got {st}")
            cin, width, cout, card, stride, reps = (int(v) for v in st)
            stages.append((BlockConfig(cin, width, cout, card, stride), reps))
        return NetworkConfig(
            stem=StemConfig(self.stem_channels, self.stem_kernel, self.stem_stride),
            stages=tuple(stages),
            se=SEConfig(self.se_reduction),
            seed=derive_seed(self.seed, "init"),
        )

    def loss_schedule(self) -> LossSchedule:
        return LossSchedule(
            warmup_epochs=self.warmup_epochs, rescale_step=self.rescale_step,
            a_bce=self.a_bce, a_f1=self.a_f1,
            a_bce_rescaled=self.a_bce_rescaled, a_f1_rescaled=self.a_f1_rescaled,
            focal_gamma=self.focal_gamma, focal_alpha=self.focal_alpha,
        )

    def augmentation(self) -> AugmentationPlan:
        if not self.augment:
            return AugmentationPlan.disabled()
        return AugmentationPlan(purple=self.purple)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, max_epochs=self.max_epochs, lr=self.lr, rho=self.rho,
            adadelta_eps=self.adadelta_eps, plateau_patience=self.plateau_patience,
            plateau_factor=self.plateau_factor, plateau_threshold=self.plateau_threshold,
            min_lr=self.min_lr, early_stop_patience=self.early_stop_patience,
            early_stop_delta=self.early_stop_delta, smoothing_k=self.smoothing_k,
            grid_size=self.grid_size, eval_batch_size=self.eval_batch_size,
            seed=derive_seed(self.seed, "train"), schedule=self.loss_schedule(),
            augmentation=self.augmentation(),
        )

    # ---- (de)serialization ---------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / CONFIG_FILENAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    def replace(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with ``overrides`` applied; unknown keys raise ConfigKeyError."""
        known = {f.name: f for f in fields(self)}
        unknown = sorted(set(overrides) - set(known))
        if unknown:
            raise ConfigKeyError(f"unknown config key(s): {', '.join(unknown)}")
        values = self.to_dict()
        for key, raw in overrides.items():
            values[key] = _coerce(key, raw, known[key].type)
        return RunConfig(**values)


def _parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(key: str, value: Any, annotation: str) -> Any:
    if isinstance(value, str) and annotation != "str":
        value = _parse_value(value)
    try:
        if annotation == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if annotation == "int":
            if isinstance(value, bool) or not float(value).is_integer():
                raise TypeError
            return int(value)
        if annotation == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if annotation == "list":
            if not isinstance(value, list):
                raise TypeError
            return value
        return str(value)
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r} expects {annotation}, got {value!r}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse a ``key = value`` document into a dict of raw values."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip() if not line.lstrip().startswith('"') else line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``.

    ``PROTLOC_OUTPUT_ROOT`` in the environment replaces the default output
    root but loses to an explicit file or flag value.
    """
    cfg = RunConfig()
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if env_root:
        cfg = cfg.replace({"output_root": env_root})
    if path is not None:
        cfg = cfg.replace(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = cfg.replace({k: v for k, v in overrides.items() if v is not None})
    return cfg
