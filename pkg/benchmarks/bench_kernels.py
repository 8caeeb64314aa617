#!/usr/bin/env python3
"""Compare the numba and numpy conv kernel backends on training-shaped work.

Usage: python benchmarks/bench_kernels.py [--repeats 30]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from shapegen import kernels

CASES = [
    # (label, N, C, F, H, K, stride, pad)
    ("decoder 16x16 3x3", 24, 24, 24, 16, 3, 1, 1),
    ("decoder 8x8 3x3", 24, 48, 48, 8, 3, 1, 1),
    ("downsample 16->8", 24, 24, 24, 16, 3, 2, 1),
    ("upsampler 32x32 3x3", 8, 24, 24, 32, 3, 1, 1),
    ("pointwise skip", 24, 24, 48, 16, 1, 1, 0),
]


def run_case(label, n, c, f, h, k, stride, pad, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, h)).astype(np.float32)
    w = rng.standard_normal((f, c, k, k)).astype(np.float32)
    y = kernels.conv2d_forward(x, w, stride, pad)
    g = rng.standard_normal(y.shape).astype(np.float32)

    def fwd_bwd():
        out, cols = kernels.conv2d_forward_with_cols(x, w, stride, pad)
        kernels.conv2d_backward(g, x, w, stride, pad, cols_t=cols)
        return out

    fwd_bwd()  # warm (JIT compile on the numba backend)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fwd_bwd()
    elapsed = (time.perf_counter() - t0) / repeats
    oh = kernels.conv_out_size(h, k, stride, pad)
    macs = 3 * n * f * c * k * k * oh * oh  # fwd + two bwd GEMMs
    print(f"  {label:22s} {elapsed * 1e3:8.2f} ms   {macs / elapsed / 1e9:6.2f} GMAC/s")
    return elapsed


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    results = {}
    backends = ["numpy"]
    try:
        kernels.set_backend("numba")
        backends.insert(0, "numba")
    except ValueError:
        print("numba unavailable; benchmarking numpy only")

    for backend in backends:
        kernels.set_backend(backend)
        print(f"backend: {backend}")
        results[backend] = [
            run_case(*case, repeats=args.repeats) for case in CASES
        ]

    if len(results) == 2:
        print("speedup (numpy time / numba time):")
        for (label, *_), tn, tp in zip(CASES, results["numba"], results["numpy"]):
            print(f"  {label:22s} {tp / tn:5.2f}x")


if __name__ == "__main__":
    main()
