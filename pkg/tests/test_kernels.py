"""numba and numpy kernels must agree exactly (both are always importable)."""
import numpy as np
import pytest

from ioodg import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@pytest.mark.parametrize("n,m", [(1, 1), (10, 3), (200, 32)])
def test_fps_backends_agree(n, m):
    pts = np.random.default_rng(n).normal(size=(n, 3))
    np.testing.assert_array_equal(K.nb_fps(pts, m, 0), K.np_fps(pts, m, 0))


def test_fps_ties_lowest_index():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    assert K.np_fps(pts, 2, 0).tolist() == [0, 1]
    assert K.nb_fps(pts, 2, 0).tolist() == [0, 1]


def test_radius_query_backends_agree():
    rng = np.random.default_rng(3)
    a, x = rng.normal(size=(16, 3)) * 0.4, rng.normal(size=(300, 3)) * 0.4
    for r in (1e-4, 0.04, 0.3):
        for u, v in zip(K.nb_radius_query(a, x, r), K.np_radius_query(a, x, r)):
            np.testing.assert_array_equal(u, v)


def test_nearest_backends_agree():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(20, 3))
    np.testing.assert_array_equal(K.nb_nearest(a, b), K.np_nearest(a, b))
    dup = np.array([[1.0, 0, 0], [1.0, 0, 0]])
    assert K.nb_nearest(np.zeros((1, 3)), dup)[0] == 0


def test_segment_ops_backends_agree():
    rng = np.random.default_rng(5)
    seg = np.sort(rng.integers(0, 7, size=60))
    seg[:7] = np.arange(7)
    seg = np.sort(seg)
    e = rng.normal(size=60) * 30
    w1, w2 = K.nb_segment_softmax(e, seg, 7), K.np_segment_softmax(e, seg, 7)
    np.testing.assert_allclose(w1, w2, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(np.bincount(seg, weights=w1, minlength=7), 1.0, atol=1e-12)
    gw = rng.normal(size=60)
    np.testing.assert_allclose(K.nb_segment_softmax_grad(w1, gw, seg, 7),
                               K.np_segment_softmax_grad(w1, gw, seg, 7), rtol=1e-12, atol=1e-14)
    x = rng.normal(size=(60, 4))
    np.testing.assert_allclose(K.nb_segment_sum(x, seg, 7), K.np_segment_sum(x, seg, 7),
                               rtol=1e-12, atol=1e-14)


def test_sq_dist_matrix():
    a, b = np.eye(3), np.zeros((2, 3))
    np.testing.assert_array_equal(K.sq_dist_matrix(a, b), np.ones((3, 2)))


def test_env_flag_selects_numpy():
    import importlib
    import subprocess
    import sys

    code = "import ioodg._kernels as k; print(k.BACKEND, k.fps is k.np_fps)"
    out = subprocess.run([sys.executable, "-c", code], env={"IOODG_NUMBA": "0", "PATH": ""},
                         capture_output=True, text=True, check=True).stdout.split()
    assert out == ["numpy", "True"]
    assert importlib.import_module("ioodg._kernels").BACKEND in ("numba", "numpy")
