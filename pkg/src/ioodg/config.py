"""Flat ``key = value`` run configuration shared by training and the CLI."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from .data import DEFAULT_CLASSES, DEFAULT_SUITE, BenchmarkConfig
from .errors import BadConfig, IoError
from .geometry import TransformDistribution
from .network import ModelConfig

ABLATIONS = ("none", "no_anchor", "no_local", "no_global", "pointnet")


@dataclass
class RunConfig:
    seed: int = 0
    # benchmark
    classes: str = ",".join(DEFAULT_CLASSES)
    n_points: int = 256
    train_per_class: int = 100
    test_per_class: int = 50
    corruptions: str = ",".join(DEFAULT_SUITE)
    outlier_range: float = 1.5
    # model
    hidden: int = 32
    layers: int = 2
    anchors: int = 32
    radius: float = 0.04
    slope: float = 0.2
    # optimization
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    batch_size: int = 16
    epochs: int = 100
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.5
    grad_clip: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    task_branch: str = "both"
    cd_layers: str = "all"
    normalize_local: bool = True
    # ablations
    no_anchor_learning: bool = False
    no_local_loss: bool = False
    no_global_loss: bool = False
    baseline: bool = False
    # augmentation: rotation limits in degrees, symmetric around 0
    aug_rot_x: float = 0.0
    aug_rot_y: float = 0.0
    aug_rot_z: float = 45.0
    aug_scale_lo: float = 0.8
    aug_scale_hi: float = 1.25
    aug_translation: float = 0.1
    aug_keep_lo: float = 0.5
    aug_keep_hi: float = 0.9
    aug_resample_prob: float = 0.0

    def validate(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.lr_decay_factor <= 0:
            raise BadConfig("learning_rate and lr_decay_factor must be > 0, weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise BadConfig("epochs, batch_size and lr_decay_every must be >= 1")
        if self.task_branch not in ("both", "original"):
            raise BadConfig(f"task_branch must be 'both' or 'original', got {self.task_branch!r}")
        if self.cd_layers not in ("all", "first"):
            raise BadConfig(f"cd_layers must be 'all' or 'first', got {self.cd_layers!r}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise BadConfig("loss weights must be >= 0")
        if not (0 < self.aug_keep_lo <= self.aug_keep_hi <= 1):
            raise BadConfig("need 0 < aug_keep_lo <= aug_keep_hi <= 1")
        if not 0 <= self.aug_resample_prob <= 1:
            raise BadConfig("aug_resample_prob must lie in [0, 1]")
        self.benchmark().validate()
        self.model().validate()
        self.augmentation().validate()

    def benchmark(self) -> BenchmarkConfig:
        return BenchmarkConfig(
            classes=tuple(c.strip() for c in self.classes.split(",") if c.strip()),
            n_points=self.n_points,
            train_per_class=self.train_per_class,
            test_per_class=self.test_per_class,
            suite=tuple(s.strip() for s in self.corruptions.split(",") if s.strip()),
            outlier_range=self.outlier_range,
        )

    @property
    def mode(self) -> str:
        if self.baseline:
            return "pointnet"
        return "no_anchor" if self.no_anchor_learning else "full"

    def model(self) -> ModelConfig:
        n_classes = len([c for c in self.classes.split(",") if c.strip()])
        return ModelConfig(hidden=self.hidden, layers=self.layers, anchors=self.anchors,
                           radius=self.radius, num_classes=n_classes, slope=self.slope,
                           mode=self.mode)

    def augmentation(self) -> TransformDistribution:
        def sym(deg):
            r = math.radians(deg)
            return (-r, r)

        return TransformDistribution(rot_x=sym(self.aug_rot_x), rot_y=sym(self.aug_rot_y),
                                     rot_z=sym(self.aug_rot_z),
                                     scale=(self.aug_scale_lo, self.aug_scale_hi),
                                     translation=self.aug_translation)

    def with_ablation(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise BadConfig(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
        return dataclasses.replace(
            self,
            no_anchor_learning=name == "no_anchor",
            no_local_loss=name == "no_local",
            no_global_loss=name == "no_global",
            baseline=name == "pointnet",
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw: str):
    kind = _FIELDS[key].type
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            val = float(text)
            if not math.isfinite(val):
                raise ValueError(text)
            return val
        return text
    except ValueError:
        raise BadConfig(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment line; unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise BadConfig(f"line {lineno}: expected key = value, got {s!r}")
        key, _, raw = s.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise BadConfig(f"unknown config key: {key}")
        values[key] = _coerce(key, raw)
    cfg = dataclasses.replace(base or RunConfig(), **values)
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``key=value`` strings on top of ``cfg``."""
    values = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in _FIELDS:
            raise BadConfig(f"unknown config key: {key}")
        values[key] = _coerce(key, raw)
    out = dataclasses.replace(cfg, **values)
    out.validate()
    return out


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_FIELDS)
    if unknown:
        raise BadConfig(f"unknown config key: {sorted(unknown)[0]}")
    cfg = RunConfig(**d)
    cfg.validate()
    return cfg
