"""Synthetic shapes, target-domain corruptions, XYZ files and batching."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadConfig, BadCount, IoError, ParseError, TooFewPoints
from .geometry import PointCloud, normalize_cloud

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "plane")
DEFAULT_CLASSES = ("sphere", "cube", "cylinder", "torus")
CORRUPTIONS = ("half_space_crop", "gaussian_jitter", "nonuniform_density", "outliers")
MIN_POINTS = 8

TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4


@dataclass
class LabeledCloud:
    cloud: PointCloud
    label: int
    domain: str = "source"
    sample_id: str = ""
    class_name: str = ""
    corruption: str = "none"
    seed: int = 0


# ------------------------------------------------------------------ shapes


def _unit_disk(rng, n):
    r = np.sqrt(rng.random(n))
    phi = rng.uniform(0.0, 2 * np.pi, n)
    return r * np.cos(phi), r * np.sin(phi)


def sample_surface(kind: str, n: int, rng) -> np.ndarray:
    """Area-uniform samples on the raw (unnormalized) surface of ``kind``.

    sphere: unit sphere. cube: faces of [-1, 1]^3. cylinder: radius 1,
    z in [-1, 1], with caps. cone: base radius 1 at z = -1, apex at z = 1,
    with base. torus: major radius 1, tube radius 0.4. plane: [-1, 1]^2 at z = 0.
    """
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        face = rng.integers(0, 6, n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face // 2
        pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
        return pts
    if kind == "cylinder":
        # lateral area 4*pi, each cap pi
        part = rng.choice(3, size=n, p=[4 / 6, 1 / 6, 1 / 6])
        phi = rng.uniform(0.0, 2 * np.pi, n)
        z = rng.uniform(-1.0, 1.0, n)
        dx, dy = _unit_disk(rng, n)
        lateral = part == 0
        x = np.where(lateral, np.cos(phi), dx)
        y = np.where(lateral, np.sin(phi), dy)
        z = np.where(lateral, z, np.where(part == 1, -1.0, 1.0))
        return np.stack([x, y, z], axis=1)
    if kind == "cone":
        slant = math.sqrt(5.0)
        p_lat = slant / (slant + 1.0)
        lateral = rng.random(n) < p_lat
        t = np.sqrt(rng.random(n))
        phi = rng.uniform(0.0, 2 * np.pi, n)
        dx, dy = _unit_disk(rng, n)
        x = np.where(lateral, t * np.cos(phi), dx)
        y = np.where(lateral, t * np.sin(phi), dy)
        z = np.where(lateral, 1.0 - 2.0 * t, -1.0)
        return np.stack([x, y, z], axis=1)
    if kind == "torus":
        out = np.empty((0, 3))
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 8
            u = rng.uniform(0.0, 2 * np.pi, m)
            v = rng.uniform(0.0, 2 * np.pi, m)
            keep = rng.random(m) < (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (TORUS_MAJOR + TORUS_MINOR)
            u, v = u[keep], v[keep]
            ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
            pts = np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)
            out = np.concatenate([out, pts])
        return out[:n]
    if kind == "plane":
        xy = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.concatenate([xy, np.zeros((n, 1))], axis=1)
    raise BadConfig(f"unknown shape {kind!r}; expected one of {SHAPES}")


def generate_shape(kind: str, n: int, seed: int) -> LabeledCloud:
    if n < MIN_POINTS:
        raise BadCount(f"need at least {MIN_POINTS} points, got {n}")
    if kind not in SHAPES:
        raise BadConfig(f"unknown shape {kind!r}; expected one of {SHAPES}")
    rng = np.random.default_rng(seed)
    cloud = normalize_cloud(PointCloud(sample_surface(kind, n, rng)))
    return LabeledCloud(cloud, SHAPES.index(kind), class_name=kind, seed=int(seed))


# -------------------------------------------------------------- corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    """``severity`` is the crop fraction, jitter sigma, density bias or outlier count."""

    mode: str
    severity: float
    seed: int = 0
    range: float = 2.0

    def validate(self):
        if self.mode not in CORRUPTIONS:
            raise BadConfig(f"unknown corruption {self.mode!r}")
        if not math.isfinite(self.severity) or self.severity < 0:
            raise BadConfig(f"severity must be finite and >= 0, got {self.severity}")
        if self.mode in ("half_space_crop", "nonuniform_density") and self.severity > 1:
            raise BadConfig(f"{self.mode} severity must lie in [0, 1]")
        if self.mode == "outliers" and (self.severity != int(self.severity) or self.range <= 0):
            raise BadConfig("outliers need an integer count and a positive range")


def _direction(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def corruption_direction(spec: CorruptionSpec) -> np.ndarray:
    """Unit normal of the crop plane / density axis used for ``spec``."""
    return _direction(np.random.default_rng(spec.seed))


def corrupt(cloud: PointCloud, spec: CorruptionSpec) -> PointCloud:
    spec.validate()
    pts = cloud.points
    n = pts.shape[0]
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "half_space_crop":
        d = _direction(rng)
        k = int(round(spec.severity * n))
        if k == 0:
            return cloud
        if n - k < MIN_POINTS:
            k = n - MIN_POINTS
        if k <= 0:
            raise TooFewPoints(f"cannot crop a {n}-point cloud and keep {MIN_POINTS}")
        order = np.argsort(pts @ d, kind="stable")
        keep = np.sort(order[: n - k])
        return PointCloud(pts[keep])
    if spec.mode == "gaussian_jitter":
        if spec.severity == 0:
            return cloud
        return PointCloud(pts + rng.normal(0.0, spec.severity, size=pts.shape))
    if spec.mode == "nonuniform_density":
        d = _direction(rng)
        proj = pts @ d
        span = proj.max() - proj.min()
        u = (proj - proj.min()) / span if span > 0 else np.zeros(n)
        keep = rng.random(n) >= spec.severity * u
        if keep.sum() < MIN_POINTS:
            raise TooFewPoints(f"density corruption left {int(keep.sum())} points")
        return PointCloud(pts[keep])
    count = int(spec.severity)
    if count == 0:
        return cloud
    r = spec.range
    extra = np.empty((0, 3))
    while extra.shape[0] < count:
        cand = rng.uniform(-r, r, size=(2 * count, 3))
        if r > 1.0:
            # outliers live off the unit-ball shape
            cand = cand[np.linalg.norm(cand, axis=1) > 1.0]
        extra = np.concatenate([extra, cand])
    return PointCloud(np.concatenate([pts, extra[:count]]))


# ------------------------------------------------------------------- files


def save_xyz(cloud: PointCloud, path, decimals: int = 12, header: str | None = None) -> None:
    fmt = f"%.{decimals}f"
    try:
        with open(path, "w", newline="\n") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            for x, y, z in cloud.points:
                fh.write(f"{fmt % x} {fmt % y} {fmt % z}\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_xyz(path) -> PointCloud:
    try:
        with open(path) as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split()
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, got {len(fields)}: {text!r}", lineno, path)
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError(f"not a number in {text!r}", lineno, path) from None
    if not rows:
        raise ParseError("file contains no points", None, path)
    arr = np.array(rows)
    if not np.isfinite(arr).all():
        raise ParseError("non-finite coordinate", None, path)
    return PointCloud(arr)


# --------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class CorruptionRange:
    mode: str
    lo: float
    hi: float

    @classmethod
    def parse(cls, text: str):
        try:
            mode, lo, hi = text.split(":")
            out = cls(mode.strip(), float(lo), float(hi))
        except ValueError:
            raise BadConfig(f"corruption entry {text!r} is not mode:lo:hi") from None
        if out.mode not in CORRUPTIONS:
            raise BadConfig(f"unknown corruption {out.mode!r}")
        if out.lo > out.hi or out.lo < 0:
            raise BadConfig(f"corruption range {text!r} is empty or negative")
        return out

    def __str__(self):
        return f"{self.mode}:{self.lo:g}:{self.hi:g}"


DEFAULT_SUITE = (
    "half_space_crop:0.25:0.5",
    "gaussian_jitter:0.02:0.05",
    "nonuniform_density:0.6:0.9",
    "outliers:8:24",
)


@dataclass(frozen=True)
class BenchmarkConfig:
    classes: tuple = DEFAULT_CLASSES
    n_points: int = 256
    train_per_class: int = 100
    test_per_class: int = 50
    suite: tuple = DEFAULT_SUITE
    outlier_range: float = 1.5

    def validate(self):
        if not self.classes:
            raise BadConfig("at least one class is required")
        for c in self.classes:
            if c not in SHAPES:
                raise BadConfig(f"unknown class {c!r}")
        if len(set(self.classes)) != len(self.classes):
            raise BadConfig("duplicate classes")
        if self.n_points < MIN_POINTS:
            raise BadConfig(f"n_points must be >= {MIN_POINTS}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise BadConfig("per-class sample counts must be >= 1")
        if not self.suite:
            raise BadConfig("corruption suite is empty")
        for entry in self.suite:
            CorruptionRange.parse(entry)


_SPLIT_CODE = {"train": 0, "test": 1}


def sample_seed(global_seed: int, split: str, class_index: int, i: int) -> int:
    """Per-sample 63-bit seed derived from ``(global_seed, split, class, index)``."""
    ss = np.random.SeedSequence([int(global_seed), _SPLIT_CODE[split], int(class_index), int(i)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _make_sample(cfg: BenchmarkConfig, global_seed, split, ci, i, suite):
    name = cfg.classes[ci]
    seed = sample_seed(global_seed, split, ci, i)
    item = generate_shape(name, cfg.n_points, seed)
    item.label = ci
    item.sample_id = f"{split}_{name}_{i:04d}"
    item.seed = seed
    if split == "test":
        item.domain = "target"
        rng = np.random.default_rng([seed, 1])
        rngsel = suite[int(rng.integers(0, len(suite)))]
        sev = rngsel.lo if rngsel.lo == rngsel.hi else float(rng.uniform(rngsel.lo, rngsel.hi))
        if rngsel.mode == "outliers":
            sev = float(int(round(sev)))
        spec = CorruptionSpec(rngsel.mode, sev, int(rng.integers(0, 2**62)), cfg.outlier_range)
        item.cloud = corrupt(item.cloud, spec)
        item.corruption = rngsel.mode
    return item


def build_benchmark(config: BenchmarkConfig, seed: int):
    """Clean source-domain train split and corrupted target-domain test split."""
    config.validate()
    suite = [CorruptionRange.parse(s) for s in config.suite]
    train, test = [], []
    for ci in range(len(config.classes)):
        for i in range(config.train_per_class):
            train.append(_make_sample(config, seed, "train", ci, i, suite))
        for i in range(config.test_per_class):
            test.append(_make_sample(config, seed, "test", ci, i, suite))
    return train, test


MANIFEST_COLUMNS = ("sample_id", "split", "class_index", "class_name", "corruption_mode", "seed")


def write_dataset(root, train, test) -> Path:
    root = Path(root)
    rows = []
    try:
        for split, items in (("train", train), ("test", test)):
            for item in items:
                folder = root / split / item.class_name
                folder.mkdir(parents=True, exist_ok=True)
                save_xyz(item.cloud, folder / f"{item.sample_id}.xyz")
                rows.append((item.sample_id, split, item.label, item.class_name,
                             item.corruption, item.seed))
        with open(root / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            w.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write dataset under {root}: {exc}") from exc
    return root / "manifest.csv"


def read_dataset(root, splits=("train", "test")) -> dict:
    """Load ``{split: [LabeledCloud]}`` in manifest order."""
    root = Path(root)
    out = {s: [] for s in splits}
    manifest = root / "manifest.csv"
    try:
        with open(manifest, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise ParseError(f"manifest columns {reader.fieldnames} != {MANIFEST_COLUMNS}",
                                 1, manifest)
            for row in reader:
                split = row["split"]
                if split not in out:
                    continue
                path = root / split / row["class_name"] / f"{row['sample_id']}.xyz"
                out[split].append(LabeledCloud(
                    load_xyz(path), int(row["class_index"]),
                    "source" if split == "train" else "target", row["sample_id"],
                    row["class_name"], row["corruption_mode"], int(row["seed"])))
    except FileNotFoundError as exc:
        raise IoError(f"missing dataset file: {exc.filename}") from exc
    return out


# ----------------------------------------------------------------- batching


def batcher(samples, batch_size: int, epoch_seed: int, epoch: int = 0) -> list:
    """Seeded shuffle into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise BadConfig("batch_size must be >= 1")
    order = np.random.default_rng([int(epoch_seed), int(epoch)]).permutation(len(samples))
    return [[samples[j] for j in order[i:i + batch_size]] for i in range(0, len(samples), batch_size)]
