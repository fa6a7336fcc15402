"""Adam, learning-rate schedule, the training loop and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, config_from_dict
from .data import build_benchmark
from .errors import IoError, NonFinite, ShapeMismatch
from .geometry import NonParamTransform, sample_param_transform
from .losses import LossBreakdown, loss_cd, loss_global, loss_local, loss_task, loss_total
from .network import (
    ModelParams,
    forward_single,
    forward_two_branch,
    init_params,
    params_from_arrays,
    predict,
)

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

METRIC_COLUMNS = ("epoch", "lr", "loss_task", "loss_cd", "loss_local", "loss_global",
                  "loss_total", "train_acc", "test_acc")


def _f32(a):
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass
class TrainState:
    params: ModelParams
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, params: ModelParams):
        return cls(params, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})

    def entries(self) -> dict:
        out = {}
        for k, p in self.params.items():
            out[f"param/{k}"] = p.data
        for k in self.params:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        out["state/step"] = np.array([self.step], dtype=np.float64)
        out["state/epoch"] = np.array([self.epoch], dtype=np.float64)
        return out

    @classmethod
    def from_entries(cls, entries: dict):
        names = [k[len("param/"):] for k in entries if k.startswith("param/")]
        params = params_from_arrays({k: entries[f"param/{k}"] for k in names})
        m = {k: entries.get(f"adam_m/{k}", np.zeros_like(params[k].data)) for k in names}
        v = {k: entries.get(f"adam_v/{k}", np.zeros_like(params[k].data)) for k in names}
        step = int(entries.get("state/step", [0])[0])
        epoch = int(entries.get("state/epoch", [0])[0])
        return cls(params, m, v, step, epoch)


def adam_step(state: TrainState, grads: dict, lr_t: float, weight_decay: float) -> TrainState:
    """One Adam update with bias correction and coupled (L2) weight decay.

    Parameters and moments are rounded to float32 values after the update so a
    float32 checkpoint restores the state bit-exactly.
    """
    for k, g in grads.items():
        if g is None:
            continue
        if g.shape != state.params[k].data.shape:
            raise ShapeMismatch(f"gradient for {k}: {g.shape} vs {state.params[k].data.shape}")
        if not np.isfinite(g).all():
            raise NonFinite(f"non-finite gradient for {k}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for k, p in state.params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        g = g + weight_decay * p.data
        m = BETA1 * state.m[k] + (1.0 - BETA1) * g
        v = BETA2 * state.v[k] + (1.0 - BETA2) * g * g
        p.data = _f32(p.data - lr_t * (m / c1) / (np.sqrt(v / c2) + EPS))
        state.m[k] = _f32(m)
        state.v[k] = _f32(v)
    return state


def lr_schedule(epoch: int, config: RunConfig) -> float:
    return config.learning_rate * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def sample_augmentation(config: RunConfig, rng: np.random.Generator, n: int):
    """Draw ``(t1, t2)`` for one sample."""
    t1 = sample_param_transform(config.augmentation(), rng)
    seed = int(rng.integers(0, 2**62))
    if config.aug_resample_prob > 0 and rng.random() < config.aug_resample_prob:
        return t1, NonParamTransform.resample(n, seed)
    lo, hi = config.aug_keep_lo, config.aug_keep_hi
    keep = lo if lo == hi else float(rng.uniform(lo, hi))
    return t1, NonParamTransform.drop_random(keep, seed)


def normalization_errors(out, tol: float = 1e-6) -> dict:
    """Largest deviation from 1 of S row sums and per-anchor attention sums, plus
    the most negative entry of S."""
    s_err, s_min, a_err = 0.0, 0.0, 0.0
    for s in out.selection:
        s_err = max(s_err, float(np.abs(s.data.sum(axis=1) - 1.0).max()))
        s_min = min(s_min, float(s.data.min()))
    branches = [out.orig] + ([out.aug] if getattr(out, "aug", None) is not None else [])
    for br in branches:
        for agg in br.attention:
            sums = np.bincount(agg.dst, weights=agg.weights, minlength=agg.features.shape[0])
            a_err = max(a_err, float(np.abs(sums - 1.0).max()))
    return {"selection": s_err, "selection_min": s_min, "attention": a_err}


def batch_loss(params, batch, config: RunConfig, aug_rngs, monitor=None) -> LossBreakdown:
    """Differentiable weighted training loss averaged over a batch."""
    mcfg = config.model()
    labels = np.array([item.label for item in batch], dtype=np.int64)
    b = len(batch)
    if mcfg.mode == "pointnet":
        outs = [forward_single(item.cloud.points, params, mcfg) for item in batch]
        logits = ad.concat([o.logits for o in outs], axis=0)
        return loss_total(loss_task(logits, labels), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    logits, logits_aug, cds, locs, globs = [], [], [], [], []
    # per-anchor mean over layers, so each local term is one squared D-vector
    # distance like the global term
    norm = 1.0 / (mcfg.anchors * mcfg.layers) if config.normalize_local else 1.0
    for item, rng in zip(batch, aug_rngs):
        pts = item.cloud.points
        t1, t2 = sample_augmentation(config, rng, pts.shape[0])
        out = forward_two_branch(pts, t1, t2, params, mcfg)
        if monitor is not None:
            monitor(out)
        logits.append(out.orig.logits)
        logits_aug.append(out.aug.logits)
        cd_layers = out.orig.anchors if config.cd_layers == "all" else out.orig.anchors[:1]
        cd = None
        for a in cd_layers:
            term = loss_cd(a, pts)
            cd = term if cd is None else ad.add(cd, term)
        cds.append(cd)
        if not config.no_local_loss:
            loc = loss_local(list(zip(out.orig.f, out.aug.f)))
            locs.append(ad.scale(loc, norm) if norm != 1.0 else loc)
        if not config.no_global_loss:
            globs.append(loss_global(out.orig.g, out.aug.g))

    def avg(terms):
        if not terms:
            return ad.Tensor(0.0)
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.scale(acc, 1.0 / b)

    task = loss_task(ad.concat(logits, axis=0), labels)
    if config.task_branch == "both":
        task = ad.scale(ad.add(task, loss_task(ad.concat(logits_aug, axis=0), labels)), 0.5)
    return loss_total(task, avg(cds), avg(locs), avg(globs),
                      config.alpha, config.beta, config.gamma)


def _clip(grads: dict, max_norm: float):
    if max_norm <= 0:
        return grads
    total = np.sqrt(np.sum([float((g * g).sum()) for g in grads.values() if g is not None]))
    if total <= max_norm:
        return grads
    f = max_norm / total
    return {k: (None if g is None else g * f) for k, g in grads.items()}


class TrainingAborted(NonFinite):
    def __init__(self, message, batch_index):
        super().__init__(message)
        self.batch_index = batch_index


def train_epoch(state: TrainState, batches, config: RunConfig, lr: float | None = None,
                monitor=None):
    """One pass over ``batches``; returns ``(state, [LossBreakdown per batch])``."""
    epoch = state.epoch
    lr = lr_schedule(epoch, config) if lr is None else lr
    records = []
    for bi, batch in enumerate(batches):
        rngs = [np.random.default_rng([config.seed, 104729, epoch, bi, k]) for k in range(len(batch))]
        for p in state.params.values():
            p.grad = None
        try:
            parts = batch_loss(state.params, batch, config, rngs, monitor)
            parts.graph.backward()
            grads = _clip({k: p.grad for k, p in state.params.items()}, config.grad_clip)
            adam_step(state, grads, lr, config.weight_decay)
        except NonFinite as exc:
            raise TrainingAborted(f"epoch {epoch}, batch {bi}: {exc}", bi) from exc
        parts.graph = None
        records.append(parts)
    state.epoch = epoch + 1
    return state, records


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("IOODG_THREADS", "0")))
    except ValueError:
        return 0


def predict_samples(params, samples, model_cfg) -> list:
    def one(item):
        with ad.no_grad():
            return predict(forward_single(item.cloud.points, params, model_cfg).logits)

    n = _threads()
    if n <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, samples))


def evaluate(params, samples, model_cfg) -> float:
    """Accuracy of the unaugmented branch; the error rate is ``1 - accuracy``."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    preds = predict_samples(params, samples, model_cfg)
    return float(np.mean([p == s.label for p, s in zip(preds, samples)]))


# ------------------------------------------------------------------ fitting


@dataclass
class FitResult:
    state: TrainState
    history: list = field(default_factory=list)
    checkpoint: Path | None = None
    metrics: Path | None = None

    @property
    def params(self):
        return self.state.params


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _mean(records, attr):
    return float(np.mean([getattr(r, attr) for r in records]))


def fit(config: RunConfig, out_dir=None, data=None, resume=None, monitor=None,
        on_epoch=None) -> FitResult:
    """Train for ``config.epochs`` epochs, evaluating both splits after each one.

    ``data`` is an optional ``(train, test)`` pair (default: build the synthetic
    benchmark from ``config.seed``). ``resume`` is a checkpoint path written by
    an earlier call with the same config; metrics rows already on disk in
    ``out_dir`` are kept.
    """
    config.validate()
    if data is None:
        data = build_benchmark(config.benchmark(), config.seed)
    train, test = data
    mcfg = config.model()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {out}: {exc}") from exc
    history = []
    if resume is not None:
        state = TrainState.from_entries(ad.load_checkpoint(resume))
        if out is not None and (out / "metrics.csv").exists():
            history = [r for r in read_metrics(out / "metrics.csv") if r["epoch"] <= state.epoch]
    else:
        state = TrainState.fresh(init_params(mcfg, config.seed))
    ckpt = metrics = None
    for epoch in range(state.epoch, config.epochs):
        lr = lr_schedule(epoch, config)
        batches = _batches(train, config, epoch)
        state, records = train_epoch(state, batches, config, lr, monitor)
        row = {"epoch": epoch + 1, "lr": lr}
        for col, attr in (("loss_task", "task"), ("loss_cd", "cd"), ("loss_local", "local"),
                          ("loss_global", "global_"), ("loss_total", "total")):
            row[col] = _mean(records, attr)
        row["train_acc"] = evaluate(state.params, train, mcfg)
        row["test_acc"] = evaluate(state.params, test, mcfg)
        history.append(row)
        log.info("epoch %d lr %.2e total %.4f task %.4f train %.3f test %.3f", epoch + 1, lr,
                 row["loss_total"], row["loss_task"], row["train_acc"], row["test_acc"])
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            metrics, ckpt = _write_outputs(out, state, history, config)
    if out is not None and metrics is None:
        metrics, ckpt = _write_outputs(out, state, history, config)
    return FitResult(state, history, ckpt, metrics)


def _batches(train, config, epoch):
    from .data import batcher

    return batcher(train, config.batch_size, config.seed, epoch)


def _write_outputs(out: Path, state, history, config):
    metrics = out / "metrics.csv"
    ckpt = out / "checkpoint.bin"
    try:
        metrics.write_text(metrics_csv(history))
    except OSError as exc:
        raise IoError(f"cannot write {metrics}: {exc}") from exc
    ad.save_checkpoint(ckpt, state.entries(), config.to_dict())
    return metrics, ckpt


def load_trained(checkpoint):
    """Return ``(params, RunConfig)`` from a checkpoint and its JSON sidecar."""
    entries = ad.load_checkpoint(checkpoint)
    side = ad.load_sidecar(checkpoint)
    cfg = config_from_dict(side) if side is not None else RunConfig()
    return TrainState.from_entries(entries).params, cfg
