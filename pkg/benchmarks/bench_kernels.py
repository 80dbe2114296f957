#!/usr/bin/env python3
"""Compare the numba and numpy kernel paths at the detector's real shapes.

The conv itself is a BLAS matmul on both paths; what differs is the window
gather (im2col) and the gradient scatter (col2im).  Run with no arguments;
use --repeat to steady the timings.

    python3 benchmarks/bench_kernels.py --repeat 5
"""

import argparse
import importlib
import os
import sys
import time

import numpy as np


def load_kernels(no_numba):
    os.environ["DENSEDET_NO_NUMBA"] = "1" if no_numba else "0"
    import densedet.kernels as k
    importlib.reload(k)
    return k


# (batch, channels, side, kernel, stride, pad) slices of the real workload
SHAPES = [
    ("stem 128px", (4, 3, 128, 3, 2, 1)),
    ("stage1 32px", (4, 16, 32, 3, 1, 1)),
    ("stage2 16px", (4, 32, 16, 3, 1, 1)),
    ("stage3 8px", (4, 64, 8, 3, 1, 1)),
    ("head 32px", (4, 32, 32, 3, 1, 1)),
]


def bench(fn, repeat):
    fn()  # warm (jit compile / page in)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def run(k, repeat):
    rows = []
    for name, (b, c, side, kk, stride, pad) in SHAPES:
        rng = np.random.default_rng(0)
        x = rng.standard_normal((b, c, side, side), dtype=np.float32)
        oh = k.conv_out_size(side, kk, stride, pad)
        cols = np.ascontiguousarray(
            rng.standard_normal((b, oh * oh, c * kk * kk), dtype=np.float32))
        t_gather = bench(lambda: k.im2col(x, kk, kk, stride, pad), repeat)
        t_scatter = bench(lambda: k.col2im(cols, c, side, side, kk, kk, stride, pad), repeat)
        rows.append((name, t_gather, t_scatter))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    numba_rows = run(load_kernels(no_numba=False), args.repeat)
    numpy_rows = run(load_kernels(no_numba=True), args.repeat)

    print(f"{'shape':<14}{'gather numba':>14}{'gather numpy':>14}"
          f"{'scatter numba':>15}{'scatter numpy':>15}")
    for (name, g_nb, s_nb), (_, g_np, s_np) in zip(numba_rows, numpy_rows):
        print(f"{name:<14}{g_nb:>12.3f}ms{g_np:>12.3f}ms{s_nb:>13.3f}ms{s_np:>13.3f}ms")
    agg_nb = sum(g + s for _, g, s in numba_rows)
    agg_np = sum(g + s for _, g, s in numpy_rows)
    print(f"\ntotal: numba {agg_nb:.3f} ms vs numpy {agg_np:.3f} ms "
          f"({agg_np / max(agg_nb, 1e-9):.2f}x)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
