"""Time the numba kernels against their numpy fallbacks, plus one training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The training-step timing runs in a subprocess per backend because the
backend is fixed when ``ioodg._kernels`` is first imported.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ioodg import _kernels as K

STEP = """
import time
import numpy as np
from ioodg.config import RunConfig
from ioodg.data import build_benchmark
from ioodg.network import init_params
from ioodg.training import TrainState, train_epoch
cfg = RunConfig(train_per_class=4, test_per_class=1)
train, _ = build_benchmark(cfg.benchmark(), 0)
st = TrainState.fresh(init_params(cfg.model(), 0))
train_epoch(st, [train[:2]], cfg)  # warm up / compile
t = time.perf_counter()
train_epoch(st, [train], cfg)
print(f"{(time.perf_counter() - t) / len(train) * 1e3:.2f}")
"""


def kernel_cases(rng):
    pts = rng.normal(size=(256, 3))
    anchors = pts[:32] + 0.01
    e = rng.normal(size=2000)
    seg = np.sort(rng.integers(0, 32, size=2000))
    x = rng.normal(size=(2000, 32))
    return {
        "fps (N=256, M=32)": (K.nb_fps, K.np_fps, (pts, 32, 0)),
        "radius_query (M=32, N=256)": (K.nb_radius_query, K.np_radius_query, (anchors, pts, 0.04)),
        "nearest (256 x 32)": (K.nb_nearest, K.np_nearest, (pts, anchors)),
        "segment_softmax (E=2000)": (K.nb_segment_softmax, K.np_segment_softmax, (e, seg, 32)),
        "segment_sum (E=2000, D=32)": (K.nb_segment_sum, K.np_segment_sum, (x, seg, 32)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true", help="skip the training-step comparison")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'numba us':>10} {'numpy us':>10} {'speedup':>8}")
    for name, (fast, slow, call) in kernel_cases(rng).items():
        fast(*call)  # compile
        tf = min(timeit.repeat(lambda: fast(*call), number=10, repeat=args.repeat)) / 10
        ts = min(timeit.repeat(lambda: slow(*call), number=10, repeat=args.repeat)) / 10
        print(f"{name:<30} {tf * 1e6:>10.1f} {ts * 1e6:>10.1f} {ts / tf:>7.1f}x")

    if args.no_step:
        return
    print()
    for flag in ("1", "0"):
        env = dict(os.environ, IOODG_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True,
                             text=True, check=True).stdout.strip()
        label = "numba" if flag == "1" else "numpy"
        print(f"training step, {label:<6} {out:>8} ms/sample")


if __name__ == "__main__":
    main()
