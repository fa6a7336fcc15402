"""Command-line entry point: ``ioodg {gen,train,eval,gradcheck,augment}``.

Human-readable progress goes to stderr. The last stdout line of every command
is ``RESULT key=value ...``.

Exit codes: 0 ok, 2 bad config/flags, 3 I/O or parse error, 4 non-finite
loss, 5 checkpoint magic mismatch, 6 gradient check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .config import ABLATIONS, RunConfig, apply_overrides, load_config
from .data import build_benchmark, load_xyz, read_dataset, save_xyz, write_dataset
from .errors import BadConfig, CheckpointError, IOODGError, IoError, NonFinite, ParseError
from .geometry import (
    NonParamTransform,
    ParamTransform,
    PointCloud,
    invert_param_transform,
    nonparam_indices,
    rotation_matrix,
    sample_param_transform,
)
from .gradcheck import tiny_gradcheck
from .training import evaluate, fit, load_trained

EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_MAGIC, EXIT_GRADCHECK = 2, 3, 4, 5, 6

TABLE_ORDER = ("pointnet", "no_anchor", "no_local", "no_global", "none")
TABLE_HEADERS = ("PointNet", "w/o Anchor Points", "w/o Local Invariance",
                 "w/o Global Invariance", "w/ all")


def _err(msg):
    print(msg, file=sys.stderr)


def _result(**kv):
    parts = []
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        parts.append(f"{k}={v}")
    print("RESULT " + " ".join(parts))


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = list(args.set or [])
    if args.seed is not None:
        over.append(f"seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        over.append(f"epochs={args.epochs}")
    return apply_overrides(cfg, over) if over else cfg


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out or "data")
    train, test = build_benchmark(cfg.benchmark(), cfg.seed)
    write_dataset(out, train, test)
    _err(f"wrote {len(train)} train / {len(test)} test clouds to {out}")
    _result(train=len(train), test=len(test), out=str(out))
    return 0


def _load_data(args, cfg):
    if args.data:
        d = read_dataset(args.data)
        return d["train"], d["test"]
    return build_benchmark(cfg.benchmark(), cfg.seed)


def _train_one(cfg, data, out_dir, resume=None):
    def progress(row):
        _err(f"[{out_dir}] epoch {row['epoch']:3d} lr {row['lr']:.2e} loss {row['loss_total']:.4f} "
             f"train {row['train_acc']:.3f} test {row['test_acc']:.3f}")

    return fit(cfg, out_dir, data=data, resume=resume, on_epoch=progress)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out or "run")
    if args.ablation == "matrix":
        return _ablation_matrix(args, cfg, out)
    cfg = cfg.with_ablation(args.ablation)
    data = _load_data(args, cfg)
    res = _train_one(cfg, data, out, args.resume)
    last = res.history[-1]
    _result(ablation=args.ablation, epochs=last["epoch"], train_acc=last["train_acc"],
            test_acc=last["test_acc"], checkpoint=str(res.checkpoint), metrics=str(res.metrics))
    return 0


def format_ablation_table(acc: dict) -> str:
    """Render mean accuracies (percent) in the PointNet | four-variant layout."""
    widths = [max(len(h), 6) for h in TABLE_HEADERS]
    head = " | ".join(h.center(w) for h, w in zip(TABLE_HEADERS, widths))
    vals = " | ".join(f"{100 * acc[m]:.1f}".center(w) for m, w in zip(TABLE_ORDER, widths))
    return f"{head}\n{'-' * len(head)}\n{vals}"


def _ablation_matrix(args, cfg, out) -> int:
    seeds = [int(s) for s in (args.seeds or str(cfg.seed)).split(",")]
    acc = {m: [] for m in TABLE_ORDER}
    for seed in seeds:
        base = cfg.replace(seed=seed)
        data = _load_data(args, base) if args.data else None
        for mode in TABLE_ORDER:
            run_cfg = base.with_ablation(mode)
            res = _train_one(run_cfg, data, out / mode / f"seed{seed}")
            acc[mode].append(res.history[-1]["test_acc"])
    mean = {m: float(np.mean(v)) for m, v in acc.items()}
    table = format_ablation_table(mean)
    _err(table)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_table.txt").write_text(table + "\n")
    _result(seeds=",".join(map(str, seeds)), **{m: mean[m] for m in TABLE_ORDER})
    return 0


def cmd_eval(args) -> int:
    params, cfg = load_trained(args.checkpoint)
    splits = ("train", "test") if args.split == "both" else (args.split,)
    data = read_dataset(args.data, splits)
    mcfg = cfg.model()
    res = {}
    for s in splits:
        acc = evaluate(params, data[s], mcfg)
        res[f"{s}_acc"] = acc
        res[f"{s}_error"] = 1.0 - acc
        _err(f"{s}: accuracy {acc:.4f}  error {1 - acc:.4f}  ({len(data[s])} samples)")
    _result(**res)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    rep = tiny_gradcheck(cfg.seed, cfg)
    _err(f"{'group':<10} {'max_rel_error':>14} {'kinks':>6}  worst parameter")
    for g, err in rep.groups.items():
        _err(f"{g:<10} {err:>14.3e} {rep.nondiff[g]:>6d}  {rep.worst_param[g]}")
    group, name, err = rep.worst
    _result(passed=str(rep.passed).lower(), max_rel_error=f"{err:.3e}", worst=name)
    if not rep.passed:
        _err(f"gradient check FAILED: {name} ({group}) relative error {err:.3e} >= {rep.tol}")
        return EXIT_GRADCHECK
    return 0


def _parse_vec(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise BadConfig(f"bad vector {text!r}") from None
    if len(vals) != 3:
        raise BadConfig(f"expected x,y,z, got {text!r}")
    return np.array(vals)


def cmd_augment(args) -> int:
    cloud = load_xyz(args.input)
    if args.random:
        cfg = _resolve_config(args)
        t1 = sample_param_transform(cfg.augmentation(), np.random.default_rng([args.seed or 0, 1]))
    else:
        if args.scale == 0:
            raise BadConfig("--scale must be nonzero")
        mat = rotation_matrix(math.radians(args.rotate_x), math.radians(args.rotate_y),
                              math.radians(args.rotate_z)) * args.scale
        tr = _parse_vec(args.translate) if args.translate else np.zeros(3)
        t1 = ParamTransform(mat, tr)
    seed = args.seed or 0
    if args.resample is not None:
        t2 = NonParamTransform.resample(args.resample, seed)
    else:
        t2 = NonParamTransform.drop_random(args.keep, seed)
    idx = nonparam_indices(cloud.n, t2)
    out_pts = t1.apply_array(cloud.points)[idx]
    out = Path(args.out or "augmented.xyz")
    save_xyz(PointCloud(out_pts), out)
    inv = invert_param_transform(t1)
    side = {
        "matrix": t1.matrix.tolist(),
        "translation": t1.translation.tolist(),
        "inverse_matrix": inv.matrix.tolist(),
        "inverse_translation": inv.translation.tolist(),
        "t2": {"kind": t2.kind, "value": t2.value, "seed": t2.seed},
        "indices": idx.tolist(),
        "source": str(args.input),
    }
    try:
        with open(str(out) + ".json", "w") as fh:
            json.dump(side, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write sidecar: {exc}") from exc
    _err(f"{cloud.n} -> {len(idx)} points written to {out}")
    _result(points=len(idx), out=str(out), sidecar=str(out) + ".json")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    common.add_argument("--config", default=None, help="key = value run config file")
    common.add_argument("--out", default=None, help="output path")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    p = argparse.ArgumentParser(prog="ioodg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="materialize the synthetic benchmark")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", default=None, help="dataset directory (default: generate in memory)")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--ablation", default="none", choices=ABLATIONS + ("matrix",))
    t.add_argument("--seeds", default=None, help="comma-separated seeds for --ablation matrix")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test", "both"), default="both")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("augment", parents=[common], help="apply t2(t1(x)) to an XYZ file")
    a.add_argument("input")
    a.add_argument("--rotate-x", type=float, default=0.0, help="degrees")
    a.add_argument("--rotate-y", type=float, default=0.0, help="degrees")
    a.add_argument("--rotate-z", type=float, default=0.0, help="degrees")
    a.add_argument("--scale", type=float, default=1.0)
    a.add_argument("--translate", default=None, help="x,y,z")
    a.add_argument("--keep", type=float, default=1.0, help="keep ratio for random dropping")
    a.add_argument("--resample", type=int, default=None, help="resample to this many points")
    a.add_argument("--random", action="store_true",
                   help="draw t1 from the config's augmentation ranges instead of the flags")
    a.set_defaults(func=cmd_augment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = os.environ.get("IOODG_THREADS")
    if threads:
        try:
            _kernels.set_threads(int(threads))
        except ValueError:
            _err(f"ignoring IOODG_THREADS={threads!r}")
    try:
        return args.func(args)
    except CheckpointError as exc:
        _err(f"error: {exc}")
        return EXIT_MAGIC
    except BadConfig as exc:
        _err(f"error: {exc}")
        return EXIT_CONFIG
    except (IoError, ParseError, OSError) as exc:
        _err(f"error: {exc}")
        return EXIT_IO
    except NonFinite as exc:
        _err(f"error: {exc}")
        return EXIT_NONFINITE
    except IOODGError as exc:
        _err(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
