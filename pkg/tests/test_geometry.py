import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ioodg.errors import BadConfig, BadCount, BadRadius, EmptyResult, NonFinite, SingularTransform
from ioodg.geometry import (
    NonParamTransform,
    ParamTransform,
    PointCloud,
    TransformDistribution,
    apply_param_transform,
    canonical_start_index,
    chamfer_distance,
    compose_augment,
    drop_count,
    farthest_point_sample,
    invert_param_transform,
    metric_to_threshold,
    nonparam_indices,
    normalize_cloud,
    radius_neighbors,
    rotation_matrix,
    sample_param_transform,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def brute_fps(pts, m, start):
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for j in range(len(pts)):
            d = min(float(((pts[j] - pts[c]) ** 2).sum()) for c in chosen)
            if d > best_d:
                best, best_d = j, d
        chosen.append(best)
    return chosen


def brute_chamfer(a, x):
    s1 = sum(min(float(((p - q) ** 2).sum()) for q in x) for p in a) / len(a)
    s2 = sum(min(float(((p - q) ** 2).sum()) for q in a) for p in x) / len(x)
    return s1 + s2


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(NonFinite):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(EmptyResult):
        PointCloud(np.zeros((0, 3)))
    assert PointCloud(np.zeros(3)).n == 1


def test_rotation_about_z_row_convention():
    r = rotation_matrix(0, 0, math.pi / 2)
    np.testing.assert_allclose(np.array([1.0, 0, 0]) @ r, [0, 1, 0], atol=1e-15)


@given(angles, angles, angles)
@settings(max_examples=50, deadline=None)
def test_rotation_is_orthonormal(ax, ay, az):
    r = rotation_matrix(ax, ay, az)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_singular_transform_rejected():
    with pytest.raises(SingularTransform):
        ParamTransform(np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(SingularTransform):
        ParamTransform(np.eye(3) * 1e-4)


@given(angles, angles, angles, st.floats(0.2, 5.0),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3))
@settings(max_examples=100, deadline=None)
def test_inverse_round_trip(ax, ay, az, s, tr):
    t = ParamTransform(rotation_matrix(ax, ay, az) * s, tr)
    pts = np.random.default_rng(0).normal(size=(20, 3))
    back = invert_param_transform(t).apply_array(t.apply_array(pts))
    np.testing.assert_allclose(back, pts, atol=1e-9)


def test_sample_param_transform_records_theta():
    dist = TransformDistribution(rot_z=(-1.0, 1.0), scale=(0.5, 2.0), translation=0.3)
    t = sample_param_transform(dist, 7)
    th = t.theta
    assert -1 <= th["rot_z"] <= 1 and 0.5 <= th["scale"] <= 2.0
    expect = rotation_matrix(th["rot_x"], th["rot_y"], th["rot_z"]) * th["scale"]
    np.testing.assert_array_equal(t.matrix, expect)
    t2 = sample_param_transform(dist, 7)
    np.testing.assert_array_equal(t.matrix, t2.matrix)


def test_transform_distribution_validation():
    with pytest.raises(BadConfig):
        TransformDistribution(scale=(-1.0, 1.0)).validate()
    with pytest.raises(BadConfig):
        TransformDistribution(rot_x=(1.0, -1.0)).validate()
    with pytest.raises(BadConfig):
        TransformDistribution(translation=-0.1).validate()


@pytest.mark.parametrize("ratio,n,k", [(0.5, 10, 5), (0.07, 100, 7), (0.01, 10, 1), (1.0, 9, 9),
                                       (0.55, 10, 6)])
def test_drop_count_ceil(ratio, n, k):
    assert drop_count(ratio, n) == k


def test_nonparam_drop_and_resample():
    idx = nonparam_indices(100, NonParamTransform.drop_random(0.3, 5))
    assert len(idx) == 30 and len(set(idx.tolist())) == 30
    assert np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(nonparam_indices(12, NonParamTransform.keep_all()), np.arange(12))
    res = nonparam_indices(10, NonParamTransform.resample(40, 3))
    assert len(res) == 40 and res.min() >= 0 and res.max() < 10
    with pytest.raises(BadConfig):
        NonParamTransform.drop_random(0.0)
    with pytest.raises(BadConfig):
        NonParamTransform("flip", 1.0)


def test_compose_applies_t1_then_t2(cloud):
    t1 = ParamTransform(rotation_matrix(0.3, 0.1, -0.2) * 1.5, [0.1, 0.2, 0.3])
    t2 = NonParamTransform.drop_random(0.5, 9)
    out = compose_augment(cloud, t1, t2)
    idx = nonparam_indices(cloud.n, t2)
    np.testing.assert_allclose(out.points, apply_param_transform(cloud, t1).points[idx])


def test_normalize_cloud_unit_ball(cloud):
    out = normalize_cloud(PointCloud(cloud.points * 7 + 3))
    np.testing.assert_allclose(out.points.mean(axis=0), 0, atol=1e-12)
    assert abs(np.linalg.norm(out.points, axis=1).max() - 1.0) < 1e-12


def test_fps_exhaustive_small_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, min(n, 4) + 1))
        pts = rng.normal(size=(n, 3))
        start = int(rng.integers(0, n))
        got = farthest_point_sample(pts, m, start).indices.tolist()
        assert got == brute_fps(pts, m, start)


def test_fps_canonical_start_is_order_free(rng):
    pts = rng.normal(size=(30, 3))
    perm = rng.permutation(30)
    a = farthest_point_sample(pts, 6).anchors
    b = farthest_point_sample(pts[perm], 6).anchors
    np.testing.assert_array_equal(a, b)
    assert canonical_start_index(pts[perm]) == int(np.argsort(perm)[canonical_start_index(pts)])


def test_fps_errors(rng):
    pts = rng.normal(size=(5, 3))
    with pytest.raises(BadCount):
        farthest_point_sample(pts, 6)
    with pytest.raises(BadCount):
        farthest_point_sample(pts, 0)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.normal(size=(int(rng.integers(1, 5)), 3))
        x = rng.normal(size=(int(rng.integers(1, 9)), 3))
        assert abs(chamfer_distance(a, x) - brute_chamfer(a, x)) <= 1e-12


def test_chamfer_symmetric_and_zero(rng):
    a, x = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
    assert chamfer_distance(a, x) == pytest.approx(chamfer_distance(x, a), abs=1e-14)
    assert chamfer_distance(x, x) == 0.0


def test_radius_neighbors_strict_threshold():
    x = np.array([[0.0, 0, 0], [0.2, 0, 0], [0.1, 0, 0], [1.0, 0, 0]])
    nb = radius_neighbors(np.zeros((1, 3)), x, r=0.04)
    # 0.2**2 == 0.04 is excluded by the strict inequality
    assert sorted(nb[0].tolist()) == [0, 2]
    assert not nb.fallback[0]


def test_radius_neighbors_fallback_nearest():
    x = np.array([[1.0, 0, 0], [2.0, 0, 0], [0.9, 0, 0]])
    nb = radius_neighbors(np.zeros((1, 3)), x, r=0.04)
    assert nb[0].tolist() == [2] and nb.fallback[0]


def test_radius_neighbors_brute_force(rng):
    a, x = rng.normal(size=(6, 3)) * 0.5, rng.normal(size=(50, 3)) * 0.5
    nb = radius_neighbors(a, x, r=0.2)
    for i in range(6):
        d = ((x - a[i]) ** 2).sum(axis=1)
        expect = np.nonzero(d < 0.2)[0] if (d < 0.2).any() else [int(np.argmin(d))]
        assert sorted(nb[i].tolist()) == list(expect)
    with pytest.raises(BadRadius):
        radius_neighbors(a, x, r=0.0)
    assert metric_to_threshold(0.2) == pytest.approx(0.04)


def test_permutation_brute_force_tiny():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3]])
    base = chamfer_distance(pts[:2], pts)
    for p in permutations(range(4)):
        assert chamfer_distance(pts[:2], pts[list(p)]) == pytest.approx(base, abs=1e-15)
