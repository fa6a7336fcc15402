"""Finite-difference audit of the full training loss on a tiny model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import gradient_check
from .config import RunConfig
from .data import generate_shape
from .network import PARAM_GROUPS, init_params, param_group
from .training import batch_loss

TINY = dict(n_points=16, anchors=4, hidden=8, layers=2, classes="sphere,cube,torus", radius=0.25)


def tiny_config(base: RunConfig | None = None) -> RunConfig:
    """N=16, M=4, D=8, L=2, C=3 with every loss term active."""
    base = base or RunConfig()
    return base.replace(**TINY, no_anchor_learning=False, no_local_loss=False,
                        no_global_loss=False, baseline=False, task_branch="both")


@dataclass
class GroupReport:
    groups: dict       # group -> max relative error
    worst_param: dict  # group -> parameter name holding the max
    nondiff: dict      # group -> count of kink points skipped
    tol: float

    @property
    def passed(self):
        return all(v < self.tol for v in self.groups.values())

    @property
    def worst(self):
        g = max(self.groups, key=self.groups.get)
        return g, self.worst_param[g], self.groups[g]


def tiny_gradcheck(seed: int = 0, base: RunConfig | None = None, h: float = 1e-4,
                   tol: float = 1e-4) -> GroupReport:
    cfg = tiny_config(base)
    mcfg = cfg.model()
    params = init_params(mcfg, seed)
    rng = np.random.default_rng([seed, 31337])
    # move off the exact-zero g2 output layer so its inputs get a nonzero gradient
    for name, p in params.items():
        if not p.data.any():
            p.data = rng.normal(0.0, 0.1, size=p.data.shape)
    kinds = cfg.benchmark().classes
    batch = []
    for k in range(2):
        item = generate_shape(kinds[k % len(kinds)], cfg.n_points, int(rng.integers(0, 2**31)))
        item.label = k % len(kinds)
        batch.append(item)

    def loss():
        rngs = [np.random.default_rng([seed, 99, k]) for k in range(len(batch))]
        return batch_loss(params, batch, cfg, rngs).graph

    rep = gradient_check(loss, params, h=h, tol=tol)
    groups = {g: 0.0 for g in PARAM_GROUPS}
    worst = {g: "" for g in PARAM_GROUPS}
    kinks = {g: 0 for g in PARAM_GROUPS}
    for name, err in rep.max_rel_error.items():
        g = param_group(name)
        kinks[g] += rep.nondiff[name]
        if not worst[g] or err > groups[g]:
            groups[g] = err
            worst[g] = name
    return GroupReport(groups, worst, kinks, tol)
