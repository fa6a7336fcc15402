"""Chamfer, local/global invariance, task and combined losses (all differentiable)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadLabel, NonFinite, ShapeMismatch
from .geometry import as_points


def loss_cd(anchors, x) -> Tensor:
    """Chamfer distance between (differentiable) anchors and a fixed cloud.

    Gradients only flow through the selected nearest pairs; equidistant
    candidates resolve to the lowest index.
    """
    a = anchors if isinstance(anchors, Tensor) else Tensor(as_points(anchors))
    pts = np.ascontiguousarray(as_points(x))
    ad_ = np.ascontiguousarray(a.data)
    to_cloud = K.nearest(ad_, pts)
    to_anchor = K.nearest(pts, ad_)
    ad.note_branch(to_cloud)
    m, n = ad_.shape[0], pts.shape[0]
    first = ad.scale(ad.sq_diff_sum(a, pts[to_cloud]), 1.0 / m)
    second = ad.scale(ad.sq_diff_sum(ad.gather(a, to_anchor), pts), 1.0 / n)
    return ad.add(first, second)


def loss_local(f_layers) -> Tensor:
    """Sum over layers of the squared Frobenius distance between aligned local features."""
    total = None
    for f, f_aug in f_layers:
        if f.shape != f_aug.shape:
            raise ShapeMismatch(f"local features {f.shape} vs {f_aug.shape}")
        term = ad.sq_diff_sum(f, f_aug)
        total = term if total is None else ad.add(total, term)
    return Tensor(0.0) if total is None else total


def loss_global(g, g_aug) -> Tensor:
    g, g_aug = ad._t(g), ad._t(g_aug)
    if g.shape != g_aug.shape:
        raise ShapeMismatch(f"global descriptors {g.shape} vs {g_aug.shape}")
    return ad.sq_diff_sum(g, g_aug)


def loss_task(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels."""
    logits = ad._t(logits)
    labels = np.asarray(labels).reshape(-1)
    c = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c or
                        not np.all(labels == np.round(labels))):
        raise BadLabel(f"labels must be integers in [0, {c})")
    return ad.cross_entropy(logits, labels.astype(np.int64))


@dataclass
class LossBreakdown:
    task: float
    cd: float
    local: float
    global_: float
    total: float
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    graph: Tensor | None = None

    def row(self):
        return {"loss_task": self.task, "loss_cd": self.cd, "loss_local": self.local,
                "loss_global": self.global_, "loss_total": self.total}


def _value(x):
    return float(x.data) if isinstance(x, Tensor) else float(x)


def loss_total(task, cd, local, global_, alpha=1.0, beta=1.0, gamma=1.0) -> LossBreakdown:
    """``task + alpha*cd + beta*local + gamma*global``.

    Accepts floats or scalar Tensors; with Tensors the differentiable total is
    kept in ``graph``.
    """
    parts = [_value(p) for p in (task, cd, local, global_)]
    if not all(math.isfinite(p) for p in parts):
        raise NonFinite(f"loss components not finite: {parts}")
    total = parts[0] + alpha * parts[1] + beta * parts[2] + gamma * parts[3]
    graph = None
    if any(isinstance(p, Tensor) for p in (task, cd, local, global_)):
        graph = ad._t(task)
        for w, p in ((alpha, cd), (beta, local), (gamma, global_)):
            graph = ad.add(graph, ad.scale(p, w))
        total = float(graph.data)
    return LossBreakdown(parts[0], parts[1], parts[2], parts[3], total,
                         float(alpha), float(beta), float(gamma), graph)
