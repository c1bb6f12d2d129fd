#!/usr/bin/env python3
"""Benchmark the compiled trajectory kernels against the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on a workload shaped like the Monte Carlo lab's blocks
(time-major, streams*replications as columns).  Results from the two
backends are cross-checked before timing.
"""

import argparse
import time

import numpy as np

from edetect._kernels import _fallback

try:
    from edetect._kernels import _core
except ImportError:
    _core = None


def bench(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=3)
    opts = parser.parse_args()

    rng = np.random.default_rng(0)
    workloads = [
        ("sr_path_log (T=2000, n=2000)",
         "sr_path_log", (rng.normal(size=(2000, 2000)),)),
        ("sr_path_log (T=2000, n=50, narrow)",
         "sr_path_log", (rng.normal(size=(2000, 50)),)),
        ("cusum_path_log (T=2000, n=2000)",
         "cusum_path_log", (rng.normal(size=(2000, 2000)),)),
        ("conformal_pvalues (T=400, n=500)",
         "conformal_pvalues",
         (rng.normal(size=(400, 500)), rng.random(size=(400, 500)))),
        ("additive_sign_sr_path (T=1000, n=250)",
         "additive_sign_sr_path", (rng.normal(size=(1000, 250)), 1.0)),
    ]

    print(f"{'kernel':44s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for label, name, args in workloads:
        py_fn = getattr(_fallback, name)
        py_time = bench(py_fn, args, opts.repeat)
        if _core is None:
            print(f"{label:44s} {py_time * 1e3:9.1f}ms {'n/a':>10s} {'':>8s}")
            continue
        c_fn = getattr(_core, name)
        np.testing.assert_allclose(c_fn(*args), py_fn(*args),
                                   rtol=1e-12, atol=1e-12)
        c_time = bench(c_fn, args, opts.repeat)
        print(f"{label:44s} {py_time * 1e3:9.1f}ms {c_time * 1e3:9.1f}ms "
              f"{py_time / c_time:7.1f}x")
    if _core is None:
        print("\ncompiled backend not built; only the fallback was timed")


if __name__ == "__main__":
    main()
