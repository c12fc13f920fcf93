"""Benchmark the numba kernel path against the pure-numpy fallback.

Runs the hot kernels on representative inputs under both settings of the
IHCMIL_NUMBA flag by re-executing itself in a subprocess with the flag
flipped, then prints a side-by-side table.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def bench_one(fn, *args, repeats: int) -> float:
    fn(*args)  # warm (JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run_suite(repeats: int) -> dict[str, float]:
    from ihcmil import kernels
    from ihcmil.mil import Bag, MilDims, _fused_step, init_params

    rng = np.random.default_rng(0)
    results: dict[str, float] = {}

    pixels = rng.integers(0, 256, size=(2048, 2048, 3)).astype(np.uint8)
    results["luminance_histogram 2048^2"] = bench_one(
        kernels.luminance_histogram, pixels, repeats=repeats
    )

    mask = rng.random((2048, 2048)) < 0.4
    results["tile_tissue_counts 2048^2/128"] = bench_one(
        kernels.tile_tissue_counts, mask, 128, 16, 16, repeats=repeats
    )

    img = np.full((1024, 1024, 3), 240, dtype=np.uint8)
    n = 2000
    xs = rng.integers(10, 1014, n)
    ys = rng.integers(10, 1014, n)
    rads = rng.integers(3, 5, n)
    cols = rng.integers(0, 256, (n, 3)).astype(np.uint8)
    results[f"stamp_disks {n} disks"] = bench_one(
        kernels.stamp_disks, img, xs, ys, rads, cols, repeats=repeats
    )

    grid = np.zeros((1024, 1024), dtype=np.uint8)
    m = 8
    results[f"fill_ellipses {m} ellipses"] = bench_one(
        kernels.fill_ellipses,
        grid,
        rng.uniform(100, 900, m),
        rng.uniform(100, 900, m),
        rng.uniform(50, 200, m),
        rng.uniform(50, 200, m),
        1,
        repeats=repeats,
    )

    dims = MilDims(d=27, h1=64, h2=64, L=32)
    params = init_params(dims, 0)
    bag = Bag("b", rng.normal(size=(16, 27)), 1, 4.0)

    def fused_loop():
        for _ in range(200):
            _fused_step(bag, params)

    results["mil_bag_step x200 (K=16)"] = bench_one(fused_loop, repeats=repeats)
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--emit-json", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.emit_json:
        print(json.dumps(run_suite(args.repeats)))
        return 0

    timings = {}
    for label, flag in (("numba", "1"), ("numpy", "0")):
        env = dict(os.environ, IHCMIL_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, __file__, "--repeats", str(args.repeats), "--emit-json"],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        )
        timings[label] = json.loads(out.stdout.strip().splitlines()[-1])

    width = max(len(k) for k in timings["numba"])
    print(f"{'kernel':<{width}}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}")
    for key in timings["numba"]:
        nb = timings["numba"][key]
        np_ = timings["numpy"][key]
        print(f"{key:<{width}}  {nb * 1e3:>8.2f}ms  {np_ * 1e3:>8.2f}ms  {np_ / nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
