"""Compare the compiled kernels with the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--iterations N]

Times each kernel on shapes seen during training, then a short end-to-end
training run under both backends (each in its own interpreter, since the
backend is fixed at import).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from medeyes import _kernels_py as py

try:
    from medeyes import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

_E2E = """
import time
from dataclasses import replace
from medeyes import harness, kernels
cfg = harness.ExperimentConfig()
cfg = replace(cfg, grpo=replace(cfg.grpo, iterations={iterations}),
              run=replace(cfg.run, n_eval=50, checkpoint_every=0))
t0 = time.perf_counter()
import tempfile
harness.train_seed(cfg, 0, tempfile.mkdtemp())
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def cases(rng):
    d, v = 33, 34
    feats = rng.normal(size=(14, d))
    theta = rng.normal(size=(d, v))
    allowed = np.ones((14, v), np.uint8)
    allowed[:, -1] = 0
    toks = rng.integers(0, v - 1, size=14)
    probs = np.full((14, v), 1.0 / v)
    weights = rng.normal(size=14)
    phi = feats[0].copy()
    row = allowed[0].copy()
    p = np.full(v, 1.0 / v)
    crop = rng.choice([0, 0, 0, 1, 2], size=(8, 8)).astype(np.int8)
    boxes = np.hstack([rng.integers(0, 12, (5, 2)), rng.integers(12, 16, (5, 2))]).astype(np.int64)
    return {
        "softmax_row": lambda m: m.softmax_row(phi, theta, row),
        "sample_index": lambda m: m.sample_index(p, 0.61),
        "batch_log_probs": lambda m: m.batch_log_probs(feats, theta, toks, allowed),
        "weighted_grad": lambda m: m.weighted_grad(feats, probs, toks, weights),
        "pool_labels": lambda m: m.pool_labels(crop, 4, 0.8),
        "separated_pairs": lambda m: m.separated_pairs(boxes, 0.1),
    }


def time_call(fn, repeat: int) -> float:
    number = max(1, repeat)
    return min(timeit.repeat(fn, number=number, repeat=5)) / number * 1e6


def end_to_end(iterations: int) -> dict[str, float]:
    out = {}
    for pure in (False, True):
        env = dict(os.environ)
        if pure:
            env["MEDEYES_PURE_PYTHON"] = "1"
        else:
            env.pop("MEDEYES_PURE_PYTHON", None)
        res = subprocess.run([sys.executable, "-c", _E2E.format(iterations=iterations)],
                             env=env, capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=2000, help="calls per timing sample")
    ap.add_argument("--iterations", type=int, default=100, help="training iterations in the end-to-end run")
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    table = cases(np.random.default_rng(0))
    print(f"{'kernel':<18}{'python (us)':>14}{'compiled (us)':>16}{'speedup':>10}")
    for name, fn in table.items():
        t_py = time_call(lambda: fn(py), args.repeat)
        t_c = time_call(lambda: fn(compiled), args.repeat)
        print(f"{name:<18}{t_py:>14.2f}{t_c:>16.2f}{t_py / t_c:>9.1f}x")
    e2e = end_to_end(args.iterations)
    print(f"\ntraining run, {args.iterations} iterations (one seed, 50 held-out episodes):")
    for backend in ("python", "compiled"):
        print(f"  {backend:<9}{e2e[backend]:8.2f} s")
    print(f"  speedup  {e2e['python'] / e2e['compiled']:8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
