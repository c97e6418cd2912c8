"""SE-ResNeXt classifier: squeeze-and-excitation gating on aggregated residual blocks."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    BatchNormState,
    Parameter,
    Tensor,
    add,
    batch_norm,
    channel_scale,
    conv2d,
    dense,
    global_avg_pool,
    relu,
    sigmoid,
)

NUM_CLASSES = 28
IN_CHANNELS = 4
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ConfigError(ValueError):
    """An architecture config violates one of its constraints."""


@dataclass(frozen=True)
class SEConfig:
    reduction_ratio: int = 4


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    bottleneck_width: int
    out_channels: int
    cardinality: int = 4
    stride: int = 1

    @property
    def has_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1


@dataclass(frozen=True)
class StemConfig:
    out_channels: int = 16
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = IN_CHANNELS
    num_classes: int = NUM_CLASSES
    stem: StemConfig = field(default_factory=StemConfig)
    stages: tuple[tuple[BlockConfig, int], ...] = (
        (BlockConfig(16, 16, 32, cardinality=4, stride=2), 2),
        (BlockConfig(32, 32, 64, cardinality=4, stride=2), 2),
    )
    se: SEConfig = field(default_factory=SEConfig)
    seed: int = 0

    def blocks(self) -> list[BlockConfig]:
        """Expand (first block, repeats) pairs into the full block list."""
        out = []
        for first, repeats in self.stages:
            out.append(first)
            for _ in range(repeats - 1):
                out.append(BlockConfig(first.out_channels, first.bottleneck_width,
                                       first.out_channels, first.cardinality, 1))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [[asdict(b), r] for b, r in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        return cls(
            in_channels=d["in_channels"],
            num_classes=d["num_classes"],
            stem=StemConfig(**d["stem"]),
            stages=tuple((BlockConfig(**b), int(r)) for b, r in d["stages"]),
            se=SEConfig(**d["se"]),
            seed=d["seed"],
        )


def validate_config(cfg: NetworkConfig) -> None:
    if cfg.in_channels != IN_CHANNELS:
        raise ConfigError(f"in_channels must be {IN_CHANNELS} (red, green, blue, yellow), got {cfg.in_channels}")
    if cfg.num_classes != NUM_CLASSES:
        raise ConfigError(f"num_classes must be {NUM_CLASSES} to match the label vector, got {cfg.num_classes}")
    if cfg.stem.out_channels < 1 or cfg.stem.kernel < 1 or cfg.stem.stride < 1:
        raise ConfigError("stem sizes must be positive")
    if not cfg.stages:
        raise ConfigError("at least one stage is required")
    r = cfg.se.reduction_ratio
    if r < 1:
        raise ConfigError(f"se.reduction_ratio must be positive, got {r}")
    prev = cfg.stem.out_channels
    for i, (b, repeats) in enumerate(cfg.stages):
        if repeats < 1:
            raise ConfigError(f"stage {i}: repeat count must be >= 1")
        if min(b.in_channels, b.bottleneck_width, b.out_channels, b.cardinality) < 1:
            raise ConfigError(f"stage {i}: channel counts and cardinality must be positive")
        if b.stride not in (1, 2):
            raise ConfigError(f"stage {i}: stride must be 1 or 2, got {b.stride}")
        if b.in_channels != prev:
            raise ConfigError(f"stage {i}: in_channels {b.in_channels} does not match previous output {prev}")
        if b.bottleneck_width % b.cardinality:
            raise ConfigError(
                f"stage {i}: bottleneck_width {b.bottleneck_width} not divisible by cardinality {b.cardinality}")
        if b.out_channels % r:
            raise ConfigError(f"stage {i}: out_channels {b.out_channels} not divisible by SE reduction ratio {r}")
        prev = b.out_channels


# ---------------------------------------------------------------------------
# parameter initialisation
# ---------------------------------------------------------------------------

def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; order drives RNG consumption in init."""
    shapes: dict[str, tuple[int, ...]] = {}
    s = cfg.stem
    shapes["stem.conv.w"] = (s.out_channels, cfg.in_channels, s.kernel, s.kernel)
    shapes["stem.bn.gamma"] = (s.out_channels,)
    shapes["stem.bn.beta"] = (s.out_channels,)
    for i, b in enumerate(cfg.blocks()):
        shapes.update(block_param_shapes(f"block{i}", b, cfg.se))
    last = cfg.blocks()[-1].out_channels
    shapes["head.w"] = (last, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def block_param_shapes(prefix: str, b: BlockConfig, se: SEConfig) -> dict[str, tuple[int, ...]]:
    wdt, gw = b.bottleneck_width, b.bottleneck_width // b.cardinality
    c, cr = b.out_channels, b.out_channels // se.reduction_ratio
    shapes = {
        f"{prefix}.conv1.w": (wdt, b.in_channels, 1, 1),
        f"{prefix}.bn1.gamma": (wdt,), f"{prefix}.bn1.beta": (wdt,),
        f"{prefix}.conv2.w": (wdt, gw, 3, 3),
        f"{prefix}.bn2.gamma": (wdt,), f"{prefix}.bn2.beta": (wdt,),
        f"{prefix}.conv3.w": (c, wdt, 1, 1),
        f"{prefix}.bn3.gamma": (c,), f"{prefix}.bn3.beta": (c,),
        f"{prefix}.se.fc1.w": (c, cr), f"{prefix}.se.fc1.b": (cr,),
        f"{prefix}.se.fc2.w": (cr, c), f"{prefix}.se.fc2.b": (c,),
    }
    if b.has_projection:
        shapes[f"{prefix}.proj.w"] = (c, b.in_channels, 1, 1)
        shapes[f"{prefix}.proj.bn.gamma"] = (c,)
        shapes[f"{prefix}.proj.bn.beta"] = (c,)
    return shapes


def he_std(shape: tuple[int, ...]) -> float:
    # conv (Cout, Cin/g, kh, kw): fan_in = Cin/g*kh*kw; dense (F, G): fan_in = F
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return float(np.sqrt(2.0 / fan_in))


def init_params(cfg: NetworkConfig, seed: int | None = None, dtype=DEFAULT_DTYPE) -> dict[str, Parameter]:
    """He-normal weights, unit BN scale, zero shifts and biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            value = np.zeros(shape)
        else:
            value = rng.standard_normal(shape) * he_std(shape)
        params[name] = Parameter(value.astype(dtype), name)
    return params


def bn_state_names(cfg: NetworkConfig) -> list[tuple[str, int]]:
    out = [("stem.bn", cfg.stem.out_channels)]
    for i, b in enumerate(cfg.blocks()):
        out += [(f"block{i}.bn1", b.bottleneck_width), (f"block{i}.bn2", b.bottleneck_width),
                (f"block{i}.bn3", b.out_channels)]
        if b.has_projection:
            out.append((f"block{i}.proj.bn", b.out_channels))
    return out


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def se_block(x: Tensor, params: Mapping[str, Tensor], r: int, prefix: str = "se") -> Tensor:
    """Squeeze (pool), excite (C -> C/r -> C MLP, sigmoid), then gate channels."""
    c = x.shape[1]
    if r < 1 or c % r:
        raise ConfigError(f"SE block: channels {c} not divisible by reduction ratio {r}")
    z = global_avg_pool(x)
    z = relu(dense(z, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    gate = sigmoid(dense(z, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"]))
    return channel_scale(x, gate)


def _bn(x, params, states, name, train):
    return batch_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"],
                      states.get(name) if states is not None else None,
                      train=train, momentum=BN_MOMENTUM, eps=BN_EPS)


def aggregated_residual_block(x: Tensor, params: Mapping[str, Tensor], cfg: BlockConfig, se: SEConfig,
                              states: Mapping[str, BatchNormState] | None = None, train: bool = True,
                              prefix: str = "block") -> Tensor:
    """relu(shortcut(x) + SE(branch(x))).

    branch: 1x1 conv, BN, relu, 3x3 grouped conv (groups=cardinality,
    carries the stride), BN, relu, 1x1 conv, BN.  The shortcut is the
    identity unless channels or stride change, then 1x1 strided conv + BN.
    """
    if x.shape[1] != cfg.in_channels:
        raise ConfigError(f"{prefix}: expected {cfg.in_channels} input channels, got {x.shape[1]}")
    p = prefix
    h = conv2d(x, params[f"{p}.conv1.w"])
    h = relu(_bn(h, params, states, f"{p}.bn1", train))
    h = conv2d(h, params[f"{p}.conv2.w"], stride=cfg.stride, pad=1, groups=cfg.cardinality)
    h = relu(_bn(h, params, states, f"{p}.bn2", train))
    h = conv2d(h, params[f"{p}.conv3.w"])
    h = _bn(h, params, states, f"{p}.bn3", train)
    h = se_block(h, params, se.reduction_ratio, prefix=f"{p}.se")
    if cfg.has_projection:
        sc = conv2d(x, params[f"{p}.proj.w"], stride=cfg.stride)
        sc = _bn(sc, params, states, f"{p}.proj.bn", train)
    else:
        sc = x
    if sc.shape != h.shape:
        raise ConfigError(f"{prefix}: branch output {h.shape} does not match shortcut {sc.shape}")
    return relu(add(sc, h))


class Model:
    """A built network: config, named parameters and BN running statistics."""

    def __init__(self, cfg: NetworkConfig, params: dict[str, Parameter] | None = None, dtype=DEFAULT_DTYPE):
        validate_config(cfg)
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, dtype=dtype)
        self.bn_states = {name: BatchNormState(c, dtype=dtype) for name, c in bn_state_names(cfg)}
        self.training = True

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def forward(self, x, train: bool | None = None) -> Tensor:
        """Logits (N, num_classes) for images (N, 4, H, W)."""
        train = self.training if train is None else train
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected input (N, {self.cfg.in_channels}, H, W), got {x.shape}")
        p, st = self.params, self.bn_states
        s = self.cfg.stem
        h = conv2d(x, p["stem.conv.w"], stride=s.stride, pad=s.kernel // 2)
        h = relu(_bn(h, p, st, "stem.bn", train))
        for i, b in enumerate(self.cfg.blocks()):
            h = aggregated_residual_block(h, p, b, self.cfg.se, st, train, prefix=f"block{i}")
        h = global_avg_pool(h)
        return dense(h, p["head.w"], p["head.b"])

    __call__ = forward

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def astype(self, dtype) -> "Model":
        """A copy of this model in another floating dtype."""
        params = {k: Parameter(v.data.astype(dtype), k) for k, v in self.params.items()}
        m = Model(self.cfg, params, dtype=dtype)
        for k, s in self.bn_states.items():
            m.bn_states[k].running_mean[...] = s.running_mean
            m.bn_states[k].running_var[...] = s.running_var
        return m

    def arrays(self) -> dict[str, np.ndarray]:
        """All persistent state: parameters followed by BN running stats."""
        out = {k: v.data for k, v in self.params.items()}
        for k, s in self.bn_states.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out


def build_network(cfg: NetworkConfig | None = None, dtype=DEFAULT_DTYPE) -> Model:
    return Model(cfg or NetworkConfig(), dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: Model, path: str | Path, extra: Mapping | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian raw blob per array."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in model.arrays().items():
        dt = _DTYPES[arr.dtype.name]
        fname = f"{name}.bin"
        (path / fname).write_bytes(np.ascontiguousarray(arr, dtype=dt).tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "file": fname})
    manifest = {"format": "protloc-checkpoint-1", "config": model.cfg.to_dict(), "arrays": entries}
    if extra:
        manifest["extra"] = dict(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = NetworkConfig.from_dict(manifest["config"])
    arrays = {}
    for e in manifest["arrays"]:
        raw = (path / e["file"]).read_bytes()
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
    names = param_shapes(cfg)
    missing = [n for n in names if n not in arrays]
    if missing:
        raise ValueError(f"checkpoint {path} lacks parameters: {missing[:5]}")
    dtype = arrays[next(iter(names))].dtype
    params = {n: Parameter(arrays[n].copy(), n) for n in names}
    model = Model(cfg, params, dtype=dtype)
    for k, s in model.bn_states.items():
        s.running_mean[...] = arrays[f"{k}.running_mean"]
        s.running_var[...] = arrays[f"{k}.running_var"]
    return model


def checkpoint_digest(path: str | Path) -> str:
    """SHA-256 over the manifest and all blobs, in manifest order."""
    path = Path(path)
    h = hashlib.sha256()
    manifest = (path / "manifest.json").read_bytes()
    h.update(manifest)
    for e in json.loads(manifest)["arrays"]:
        h.update((path / e["file"]).read_bytes())
    return h.hexdigest()
