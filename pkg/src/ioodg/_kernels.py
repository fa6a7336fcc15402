"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and ``IOODG_NUMBA`` is not
set to ``0``/``false``/``off``. Both paths are always importable as
``np_<name>`` / ``nb_<name>`` so tests and the benchmark can compare them;
the unprefixed names are the dispatched versions.

Tie-breaking everywhere is "lowest index wins".
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("IOODG_NUMBA", "1").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "off", "no")
BACKEND = "numba" if USE_NUMBA else "numpy"


def sq_dist_matrix(a, b):
    """Pairwise squared distances, shape (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


# ---------------------------------------------------------------- numpy path


def np_fps(points, m, start):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for k in range(m):
        out[k] = cur
        d = ((points - points[cur]) ** 2).sum(axis=1)
        np.minimum(mind, d, out=mind)
        mind[out[: k + 1]] = -1.0
        cur = int(np.argmax(mind))
    return out


def np_radius_query(anchors, points, r):
    d = sq_dist_matrix(anchors, points)
    inside = d < r
    counts = inside.sum(axis=1)
    fallback = counts == 0
    if fallback.any():
        nearest = np.argmin(d[fallback], axis=1)
        inside[np.nonzero(fallback)[0], nearest] = True
        counts = inside.sum(axis=1)
    indptr = np.zeros(anchors.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.nonzero(inside)[1].astype(np.int64)
    return indptr, indices, fallback


def np_nearest(a, b):
    return np.argmin(sq_dist_matrix(a, b), axis=1).astype(np.int64)


def np_segment_softmax(e, seg, nseg):
    mx = np.full(nseg, -np.inf)
    np.maximum.at(mx, seg, e)
    ex = np.exp(e - mx[seg])
    den = np.zeros(nseg)
    np.add.at(den, seg, ex)
    return ex / den[seg]


def np_segment_softmax_grad(w, gw, seg, nseg):
    wg = w * gw
    acc = np.zeros(nseg)
    np.add.at(acc, seg, wg)
    return wg - w * acc[seg]


def np_segment_sum(x, seg, nseg):
    out = np.zeros((nseg, x.shape[1]))
    np.add.at(out, seg, x)
    return out


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def nb_fps(points, m, start):
        n = points.shape[0]
        out = np.empty(m, dtype=np.int64)
        mind = np.full(n, np.inf)
        cur = start
        for k in range(m):
            out[k] = cur
            px, py, pz = points[cur, 0], points[cur, 1], points[cur, 2]
            mind[cur] = -1.0
            best = -1
            bestd = -np.inf
            for j in range(n):
                if mind[j] < 0.0:
                    continue
                dx = points[j, 0] - px
                dy = points[j, 1] - py
                dz = points[j, 2] - pz
                d = dx * dx + dy * dy + dz * dz
                if d < mind[j]:
                    mind[j] = d
                if mind[j] > bestd:
                    bestd = mind[j]
                    best = j
            cur = best
        return out

    @numba.njit(cache=True)
    def nb_radius_query(anchors, points, r):
        m = anchors.shape[0]
        n = points.shape[0]
        counts = np.zeros(m, dtype=np.int64)
        fallback = np.zeros(m, dtype=np.bool_)
        nearest = np.zeros(m, dtype=np.int64)
        for i in range(m):
            best = np.inf
            for j in range(n):
                dx = anchors[i, 0] - points[j, 0]
                dy = anchors[i, 1] - points[j, 1]
                dz = anchors[i, 2] - points[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < r:
                    counts[i] += 1
                if d < best:
                    best = d
                    nearest[i] = j
            if counts[i] == 0:
                fallback[i] = True
                counts[i] = 1
        indptr = np.zeros(m + 1, dtype=np.int64)
        for i in range(m):
            indptr[i + 1] = indptr[i] + counts[i]
        indices = np.empty(indptr[m], dtype=np.int64)
        for i in range(m):
            if fallback[i]:
                indices[indptr[i]] = nearest[i]
                continue
            k = indptr[i]
            for j in range(n):
                dx = anchors[i, 0] - points[j, 0]
                dy = anchors[i, 1] - points[j, 1]
                dz = anchors[i, 2] - points[j, 2]
                if dx * dx + dy * dy + dz * dz < r:
                    indices[k] = j
                    k += 1
        return indptr, indices, fallback

    @numba.njit(cache=True)
    def nb_nearest(a, b):
        out = np.empty(a.shape[0], dtype=np.int64)
        for i in range(a.shape[0]):
            best = np.inf
            arg = 0
            for j in range(b.shape[0]):
                dx = a[i, 0] - b[j, 0]
                dy = a[i, 1] - b[j, 1]
                dz = a[i, 2] - b[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
                    arg = j
            out[i] = arg
        return out

    @numba.njit(cache=True)
    def nb_segment_softmax(e, seg, nseg):
        mx = np.full(nseg, -np.inf)
        for k in range(e.shape[0]):
            if e[k] > mx[seg[k]]:
                mx[seg[k]] = e[k]
        ex = np.empty_like(e)
        den = np.zeros(nseg)
        for k in range(e.shape[0]):
            ex[k] = np.exp(e[k] - mx[seg[k]])
            den[seg[k]] += ex[k]
        for k in range(e.shape[0]):
            ex[k] /= den[seg[k]]
        return ex

    @numba.njit(cache=True)
    def nb_segment_softmax_grad(w, gw, seg, nseg):
        acc = np.zeros(nseg)
        out = np.empty_like(w)
        for k in range(w.shape[0]):
            out[k] = w[k] * gw[k]
            acc[seg[k]] += out[k]
        for k in range(w.shape[0]):
            out[k] -= w[k] * acc[seg[k]]
        return out

    @numba.njit(cache=True)
    def nb_segment_sum(x, seg, nseg):
        out = np.zeros((nseg, x.shape[1]))
        for k in range(x.shape[0]):
            s = seg[k]
            for c in range(x.shape[1]):
                out[s, c] += x[k, c]
        return out

else:  # pragma: no cover
    nb_fps = np_fps
    nb_radius_query = np_radius_query
    nb_nearest = np_nearest
    nb_segment_softmax = np_segment_softmax
    nb_segment_softmax_grad = np_segment_softmax_grad
    nb_segment_sum = np_segment_sum


if USE_NUMBA:
    fps = nb_fps
    radius_query = nb_radius_query
    nearest = nb_nearest
    segment_softmax = nb_segment_softmax
    segment_softmax_grad = nb_segment_softmax_grad
    segment_sum = nb_segment_sum
else:
    fps = np_fps
    radius_query = np_radius_query
    nearest = np_nearest
    segment_softmax = np_segment_softmax
    segment_softmax_grad = np_segment_softmax_grad
    segment_sum = np_segment_sum


def set_threads(n):
    """Cap numba's worker threads; ``0`` or negative means serial."""
    if HAVE_NUMBA:
        numba.set_num_threads(max(1, min(int(n) if n > 0 else 1, numba.config.NUMBA_NUM_THREADS)))
