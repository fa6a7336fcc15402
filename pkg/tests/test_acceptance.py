"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The long training criteria (convergence and the ablation ordering) share runs.
Completed runs are cached under ``$IOODG_ACCEPT_DIR`` (default
``.acceptance_runs`` in the repository root) and reused through the bit-exact
resume path when their stored config matches.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ioodg import autodiff as ad
from ioodg.config import RunConfig, parse_config, serialize_config
from ioodg.data import build_benchmark
from ioodg.geometry import (
    NonParamTransform,
    ParamTransform,
    TransformDistribution,
    chamfer_distance,
    farthest_point_sample,
    invert_param_transform,
    sample_param_transform,
)
from ioodg.gradcheck import tiny_gradcheck
from ioodg.network import (
    ModelConfig,
    extract_features,
    forward_two_branch,
    fps_anchors,
    init_params,
    learn_anchors,
)
from ioodg.training import (
    TrainState,
    batch_loss,
    fit,
    normalization_errors,
    read_metrics,
    train_epoch,
)
from ioodg.data import batcher

from test_geometry import brute_chamfer, brute_fps

SEEDS = (0, 1, 2)
ABLATION_MODES = ("none", "no_anchor", "no_local", "no_global", "pointnet")
RUN_ROOT = Path(os.environ.get("IOODG_ACCEPT_DIR", Path(__file__).resolve().parents[1] / ".acceptance_runs"))

pytestmark = pytest.mark.acceptance


def report(record_criterion, n, ok, detail):
    record_criterion(n, ok, detail)
    assert ok, f"criterion {n}: {detail}"


def cached_fit(cfg: RunConfig, name: str):
    """Train ``cfg`` into ``RUN_ROOT/name``; reuse a finished run with an identical config."""
    out = RUN_ROOT / name
    ckpt = out / "checkpoint.bin"
    side = out / "checkpoint.bin.json"
    stored = out / "run.cfg"
    text = serialize_config(cfg)
    if ckpt.exists() and side.exists() and stored.exists() and stored.read_text() == text:
        res = fit(cfg, out, resume=ckpt)
        if len(res.history) == cfg.epochs:
            return res.history
    out.mkdir(parents=True, exist_ok=True)
    for p in (ckpt, side, out / "metrics.csv"):
        if p.exists():
            p.unlink()
    stored.write_text(text)
    return fit(cfg, out).history


# ----------------------------------------------------------------- criteria


def test_c01_gradient_fidelity(record_criterion):
    t = time.perf_counter()
    worst = (0.0, "")
    for seed in range(5):
        rep = tiny_gradcheck(seed)
        g, name, err = rep.worst
        if err >= worst[0]:
            worst = (err, f"seed {seed} {name}")
        assert set(rep.groups) == {"f1", "f2", "g1", "g2", "attention", "head"}
    elapsed = time.perf_counter() - t
    ok = worst[0] < 1e-4 and elapsed < 120
    report(record_criterion, 1, ok,
           f"max rel error {worst[0]:.2e} ({worst[1]}) over 5 seeds in {elapsed:.0f}s")


def test_c02_permutation_invariance(record_criterion):
    t = time.perf_counter()
    cfg = ModelConfig(hidden=32, layers=2, anchors=32)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    for p in params.values():
        if not p.data.any():
            p.data = rng.normal(0, 0.1, size=p.shape)
    worst, equivariant = 0.0, True
    for trial in range(100):
        x = rng.normal(size=(128, 3))
        x /= np.linalg.norm(x, axis=1).max()
        a0 = fps_anchors(x, 32)
        perm = rng.permutation(128)
        h = extract_features(params, 1, x)
        hp = extract_features(params, 1, x[perm])
        equivariant &= bool(np.array_equal(hp.data, h.data[perm]))
        a, _ = learn_anchors(h, a0, params, 1)
        ap, _ = learn_anchors(hp, a0, params, 1)
        worst = max(worst, float(np.abs(a.data - ap.data).max()))
    elapsed = time.perf_counter() - t
    ok = worst < 1e-6 and equivariant and elapsed < 60
    report(record_criterion, 2, ok,
           f"max anchor deviation {worst:.1e}, features equivariant={equivariant}, {elapsed:.1f}s")


def test_c03_transform_round_trips(record_criterion):
    rng = np.random.default_rng(3)
    dist = TransformDistribution(rot_x=(-math.pi, math.pi), rot_y=(-math.pi, math.pi),
                                 rot_z=(-math.pi, math.pi), scale=(0.2, 5.0), translation=2.0)
    pts = rng.normal(size=(50, 3))
    worst_inv = 0.0
    for _ in range(1000):
        t1 = sample_param_transform(dist, rng)
        back = invert_param_transform(t1).apply_array(t1.apply_array(pts))
        worst_inv = max(worst_inv, float(np.abs(back - pts).max()))
    cfg = ModelConfig()
    params = init_params(cfg, 1)
    worst_fw = 0.0
    for k in range(20):
        x = rng.normal(size=(256, 3))
        x /= np.linalg.norm(x, axis=1).max()
        t1 = sample_param_transform(dist, rng)
        out = forward_two_branch(x, t1, NonParamTransform.drop_random(0.7, k), params, cfg)
        for a, a_aug in zip(out.orig.anchors, out.aug.anchors):
            worst_fw = max(worst_fw, float(np.abs(t1.apply_array(a.data) - a_aug.data).max()))
    ok = worst_inv <= 1e-9 and worst_fw <= 1e-9
    report(record_criterion, 3, ok,
           f"inverse round trip {worst_inv:.1e}, forward anchors {worst_fw:.1e} (tol 1e-9)")


def test_c04_oracle_equivalence(record_criterion):
    rng = np.random.default_rng(4)
    worst, fps_ok = 0.0, True
    for _ in range(200):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, min(n, 4) + 1))
        x = rng.normal(size=(n, 3))
        a = rng.normal(size=(m, 3))
        worst = max(worst, abs(chamfer_distance(a, x) - brute_chamfer(a, x)))
        start = int(rng.integers(0, n))
        fps_ok &= farthest_point_sample(x, m, start).indices.tolist() == brute_fps(x, m, start)
    ok = worst <= 1e-12 and fps_ok
    report(record_criterion, 4, ok, f"chamfer max diff {worst:.1e}, fps identical={fps_ok}")


def _degenerate(cfg):
    return cfg.replace(aug_rot_x=0.0, aug_rot_y=0.0, aug_rot_z=0.0, aug_scale_lo=1.0,
                       aug_scale_hi=1.0, aug_translation=0.0, aug_keep_lo=1.0, aug_keep_hi=1.0,
                       aug_resample_prob=0.0)


def test_c05_degenerate_augmentation(record_criterion):
    cfg = _degenerate(RunConfig(epochs=5))
    seen = []

    def monitor(out):
        loc = sum(float(ad.sq_diff_sum(f, fa).data) for f, fa in zip(out.orig.f, out.aug.f))
        glob = float(ad.sq_diff_sum(out.orig.g, out.aug.g).data)
        seen.append((loc, glob))

    res = fit(cfg, monitor=monitor)
    per_pass = max(max(a, b) for a, b in seen)
    per_epoch = max(max(r["loss_local"], r["loss_global"]) for r in res.history)
    ok = per_pass == 0.0 and per_epoch == 0.0 and len(res.history) == 5
    report(record_criterion, 5, ok,
           f"{len(seen)} forward passes, max local/global {per_pass!r}, epoch means {per_epoch!r}")


def test_c06_normalization(record_criterion):
    cfg = RunConfig()
    train, _ = build_benchmark(cfg.benchmark(), cfg.seed)
    errs = {"selection": 0.0, "attention": 0.0, "selection_min": 0.0}
    passes = [0]

    def monitor(out):
        e = normalization_errors(out)
        passes[0] += 1
        errs["selection"] = max(errs["selection"], e["selection"])
        errs["attention"] = max(errs["attention"], e["attention"])
        errs["selection_min"] = min(errs["selection_min"], e["selection_min"])

    state = TrainState.fresh(init_params(cfg.model(), cfg.seed))
    train_epoch(state, batcher(train, cfg.batch_size, cfg.seed, 0), cfg, monitor=monitor)
    ok = errs["selection"] <= 1e-6 and errs["attention"] <= 1e-6 and errs["selection_min"] >= 0
    report(record_criterion, 6, ok,
           f"{passes[0]} passes: S row error {errs['selection']:.1e}, "
           f"attention sum error {errs['attention']:.1e}")


@pytest.fixture(scope="module")
def full_runs():
    t = time.perf_counter()
    runs = {s: cached_fit(RunConfig(seed=s), f"none/seed{s}") for s in SEEDS}
    return runs, time.perf_counter() - t


def test_c07_training_convergence(record_criterion, full_runs):
    runs, elapsed = full_runs
    acc = {s: runs[s][-1]["train_acc"] for s in SEEDS}
    ok = all(a >= 0.95 for a in acc.values()) and all(len(h) == 100 for h in runs.values())
    detail = ", ".join(f"seed {s} {acc[s]:.3f}" for s in SEEDS)
    report(record_criterion, 7, ok, f"final train accuracy {detail} ({elapsed / 60:.1f} min)")


def test_c08_ablation_ordering(record_criterion, full_runs):
    runs, _ = full_runs
    acc = {"none": [runs[s][-1]["test_acc"] for s in SEEDS]}
    for mode in ABLATION_MODES[1:]:
        acc[mode] = [cached_fit(RunConfig(seed=s).with_ablation(mode), f"{mode}/seed{s}")[-1]["test_acc"]
                     for s in SEEDS]
    mean = {m: 100 * float(np.mean(v)) for m, v in acc.items()}
    beats = all(mean["none"] - mean[m] >= 1.0 for m in ("no_anchor", "no_local", "no_global"))
    above = all(mean[m] > mean["pointnet"] for m in ("none", "no_anchor", "no_local", "no_global"))
    detail = " ".join(f"{m}={mean[m]:.1f}" for m in ABLATION_MODES)
    report(record_criterion, 8, beats and above, f"mean OOD accuracy % {detail}")


def test_c09_determinism_and_resume(record_criterion, tmp_path):
    cfg = RunConfig(epochs=4, train_per_class=25, test_per_class=10)
    data = build_benchmark(cfg.benchmark(), cfg.seed)
    fit(cfg, tmp_path / "a", data=data)
    fit(cfg, tmp_path / "b", data=data)
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    k = 2
    fit(cfg.replace(epochs=k), tmp_path / "c", data=data)
    fit(cfg, tmp_path / "c", data=data, resume=tmp_path / "c" / "checkpoint.bin")
    resumed = (tmp_path / "c" / "metrics.csv").read_bytes() == (tmp_path / "a" / "metrics.csv").read_bytes()
    ckpt_same = (tmp_path / "c" / "checkpoint.bin").read_bytes() == (tmp_path / "a" / "checkpoint.bin").read_bytes()
    rows = len(read_metrics(tmp_path / "a" / "metrics.csv"))
    ok = same and resumed and ckpt_same and rows == 4
    report(record_criterion, 9, ok,
           f"identical CSVs={same}, resume@{k} CSV={resumed}, checkpoint={ckpt_same}")


def test_c10_hyperparameter_defaults(record_criterion):
    cfg = RunConfig()
    vals = (cfg.learning_rate, cfg.weight_decay, cfg.batch_size, cfg.alpha, cfg.beta,
            cfg.gamma, cfg.layers)
    defaults_ok = vals == (0.001, 0.0001, 16, 1.0, 1.0, 1.0, 2)
    big = parse_config("anchors = 256\n")
    train, _ = build_benchmark(big.replace(train_per_class=1, test_per_class=1).benchmark(), 0)
    params = init_params(big.model(), 0)
    rngs = [np.random.default_rng([0, k]) for k in range(len(train))]
    lb = batch_loss(params, train[:2], big, rngs)
    lb.graph.backward()
    ok = defaults_ok and big.anchors == 256 and math.isfinite(lb.total)
    report(record_criterion, 10, ok,
           f"lr/wd/batch/alpha/beta/gamma/L = {vals}; M=256 step loss {lb.total:.3f}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
