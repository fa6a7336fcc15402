"""Point clouds, rigid/affine and sampling transforms, FPS, radius neighborhoods."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import (
    BadConfig,
    BadCount,
    BadRadius,
    EmptyResult,
    NonFinite,
    SingularTransform,
)

DET_EPS = 1e-9
DEFAULT_RADIUS = 0.04


def _check_points(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise EmptyResult("point cloud must contain at least one point")
    if not np.isfinite(pts).all():
        raise NonFinite("point coordinates contain NaN or Inf")
    return pts


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (N, 3) array of finite coordinates."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _check_points(self.points))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """M anchor coordinates, optionally remembering which cloud rows they came from."""

    anchors: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "anchors", _check_points(self.anchors))

    @property
    def m(self) -> int:
        return self.anchors.shape[0]


def as_points(obj) -> np.ndarray:
    if isinstance(obj, PointCloud):
        return obj.points
    if isinstance(obj, AnchorSet):
        return obj.anchors
    return _check_points(obj)


# ------------------------------------------------------------------ transforms


@dataclass(frozen=True, eq=False)
class ParamTransform:
    """Row-vector affine map ``p -> p @ matrix + translation``.

    ``theta`` keeps the sampled parameters (angles in radians, scale,
    translation) when the transform came from :func:`sample_param_transform`.
    """

    matrix: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta: dict | None = None

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(mat).all() and np.isfinite(tr).all()):
            raise NonFinite("transform has non-finite entries")
        if abs(np.linalg.det(mat)) <= DET_EPS:
            raise SingularTransform(f"|det| = {abs(np.linalg.det(mat)):.3g} <= {DET_EPS}")
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def apply_array(self, points):
        return points @ self.matrix + self.translation


def apply_param_transform(cloud: PointCloud, t: ParamTransform) -> PointCloud:
    return PointCloud(t.apply_array(cloud.points))


def invert_param_transform(t: ParamTransform) -> ParamTransform:
    inv = np.linalg.inv(t.matrix)
    return ParamTransform(inv, -t.translation @ inv)


def rotation_matrix(ax: float = 0.0, ay: float = 0.0, az: float = 0.0) -> np.ndarray:
    """Row-vector rotation: rotate about x, then y, then z (angles in radians)."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, sx], [0, -sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, sz, 0], [-sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rx @ ry @ rz


@dataclass(frozen=True)
class TransformDistribution:
    """Ranges from which a parameterized transform is drawn.

    Angles are radians, one ``(lo, hi)`` per axis. ``scale`` is a uniform
    scale range that must not contain 0. Translation components are drawn
    from ``[-translation, translation]``.
    """

    rot_x: tuple[float, float] = (0.0, 0.0)
    rot_y: tuple[float, float] = (0.0, 0.0)
    rot_z: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)
    translation: float = 0.0

    def validate(self):
        for name in ("rot_x", "rot_y", "rot_z", "scale"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise BadConfig(f"{name} range [{lo}, {hi}] is empty")
        lo, hi = self.scale
        if lo <= 0.0 <= hi:
            raise BadConfig(f"scale range [{lo}, {hi}] contains 0")
        if not math.isfinite(self.translation) or self.translation < 0:
            raise BadConfig("translation magnitude must be a finite value >= 0")


def _uniform(rng, lo, hi):
    # degenerate ranges return the endpoint exactly
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_param_transform(config: TransformDistribution, rng_seed) -> ParamTransform:
    config.validate()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    ax = _uniform(rng, *config.rot_x)
    ay = _uniform(rng, *config.rot_y)
    az = _uniform(rng, *config.rot_z)
    s = _uniform(rng, *config.scale)
    if config.translation > 0:
        tr = rng.uniform(-config.translation, config.translation, size=3)
    else:
        tr = np.zeros(3)
    mat = rotation_matrix(ax, ay, az) * s
    theta = {"rot_x": ax, "rot_y": ay, "rot_z": az, "scale": s, "translation": tr.tolist()}
    return ParamTransform(mat, tr, theta)


@dataclass(frozen=True)
class NonParamTransform:
    """Point dropping (``kind="drop"``, value = keep ratio) or resampling
    with replacement (``kind="resample"``, value = target count)."""

    kind: str
    value: float
    seed: int = 0

    def __post_init__(self):
        if self.kind == "drop":
            if not (0.0 < self.value <= 1.0):
                raise BadConfig(f"keep_ratio must lie in (0, 1], got {self.value}")
        elif self.kind == "resample":
            if int(self.value) != self.value or self.value < 1:
                raise BadConfig(f"target_count must be a positive integer, got {self.value}")
        else:
            raise BadConfig(f"unknown non-parameterized transform {self.kind!r}")

    @classmethod
    def keep_all(cls):
        return cls("drop", 1.0, 0)

    @classmethod
    def drop_random(cls, keep_ratio, seed=0):
        return cls("drop", float(keep_ratio), int(seed))

    @classmethod
    def resample(cls, target_count, seed=0):
        return cls("resample", int(target_count), int(seed))


def drop_count(keep_ratio: float, n: int) -> int:
    # the small slack keeps 0.07 * 100 from ceiling to 8
    return int(math.ceil(keep_ratio * n - 1e-9))


def nonparam_indices(n: int, t: NonParamTransform) -> np.ndarray:
    """Row indices selected by ``t`` from an n-point cloud (sorted for drops)."""
    rng = np.random.default_rng(t.seed)
    if t.kind == "drop":
        k = drop_count(t.value, n)
        if k < 1:
            raise EmptyResult("drop would remove every point")
        if k >= n:
            return np.arange(n, dtype=np.int64)
        return np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
    k = int(t.value)
    if k < 1:
        raise EmptyResult("resample target is zero")
    return rng.integers(0, n, size=k).astype(np.int64)


def apply_nonparam_transform(cloud: PointCloud, t: NonParamTransform) -> PointCloud:
    return PointCloud(cloud.points[nonparam_indices(cloud.n, t)])


def compose_augment(cloud: PointCloud, t1: ParamTransform, t2: NonParamTransform) -> PointCloud:
    """Apply ``t1`` first, then ``t2``."""
    return apply_nonparam_transform(apply_param_transform(cloud, t1), t2)


# --------------------------------------------------------------- normalization


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    scale = float(np.sqrt((centered * centered).sum(axis=1)).max())
    if scale == 0.0:
        scale = 1.0
    return PointCloud(centered / scale)


# ------------------------------------------------------------ sampling/search


def canonical_start_index(points) -> int:
    """Index of the lexicographically smallest point; invariant to row order."""
    pts = as_points(points)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    return int(order[0])


def farthest_point_sample(cloud, m: int, start_index: int | None = None) -> AnchorSet:
    pts = as_points(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise BadCount(f"cannot select {m} anchors from {n} points")
    if start_index is None:
        start_index = canonical_start_index(pts)
    if not 0 <= start_index < n:
        raise BadCount(f"start_index {start_index} out of range for {n} points")
    idx = K.fps(np.ascontiguousarray(pts), int(m), int(start_index))
    return AnchorSet(pts[idx], idx)


@dataclass(frozen=True, eq=False)
class NeighborhoodSet:
    """CSR-packed neighborhoods: anchor i owns ``indices[indptr[i]:indptr[i+1]]``.

    ``fallback[i]`` marks anchors whose radius ball was empty and which were
    given their single nearest point instead. ``r`` thresholds squared distance.
    """

    indptr: np.ndarray
    indices: np.ndarray
    fallback: np.ndarray
    r: float

    @property
    def m(self) -> int:
        return self.indptr.shape[0] - 1

    def __getitem__(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def __len__(self):
        return self.m

    def sizes(self):
        return np.diff(self.indptr)

    def owners(self):
        """Anchor id for every entry of ``indices``."""
        return np.repeat(np.arange(self.m), self.sizes())


def metric_to_threshold(rho: float) -> float:
    """Convert a metric radius into the squared-distance threshold used here."""
    return float(rho) ** 2


def radius_neighbors(anchors, cloud, r: float = DEFAULT_RADIUS) -> NeighborhoodSet:
    if not r > 0:
        raise BadRadius(f"radius threshold must be > 0, got {r}")
    a = np.ascontiguousarray(as_points(anchors))
    x = np.ascontiguousarray(as_points(cloud))
    indptr, indices, fallback = K.radius_query(a, x, float(r))
    return NeighborhoodSet(indptr, indices, fallback, float(r))


def chamfer_distance(a, x) -> float:
    """Mean nearest squared distance anchors->cloud plus cloud->anchors."""
    d = K.sq_dist_matrix(as_points(a), as_points(x))
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())
