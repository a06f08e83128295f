#!/usr/bin/env python3
"""Compare the compiled kernel core against the numpy fallback.

Times the LUT-GEMM and the sequential SSM scan on representative shapes and
asserts the two backends produce bit-identical outputs while at it. Shapes
default to a 224x224 tiny-encoder workload (197 tokens).

    python3 benchmarks/bench_kernels.py --repeat 5
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vimq._kernels import HAVE_COMPILED, lut_gemm, ssm_scan
from vimq.codebook import default_codebook
from vimq.quant import ActQuantConfig, QuantizedWeights, quantize_activations


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_lut_gemm(tokens: int, in_dim: int, out_dim: int, tile: int, repeat: int) -> None:
    rng = np.random.default_rng(0)
    cb = default_codebook(4)
    w = rng.normal(0, 0.05, (out_dim, in_dim)).astype(np.float32)
    x = rng.normal(0, 1, (tokens, in_dim)).astype(np.float32)
    qw = QuantizedWeights.from_float(w, min(tile, 32), cb)
    q, scales = quantize_activations(x, ActQuantConfig())
    qpad = np.zeros((tokens, qw.codes.shape[1]), np.int8)
    qpad[:, :in_dim] = q
    deq = scales * np.float32(2.0**-8)
    levels = np.asarray(cb.levels_int(8), np.int32)

    runs = {}
    for backend in ("fallback", "compiled") if HAVE_COMPILED else ("fallback",):
        args = (qpad, deq, qw.codes, qw.scales, levels, cb.magnitude_bits, qw.block_size, tile)
        runs[backend] = lut_gemm(*args, backend=backend)
        dt = _time(lambda: lut_gemm(*args, backend=backend), repeat)
        gops = 2 * tokens * in_dim * out_dim / dt / 1e9
        print(f"  lut_gemm[{backend:8s}] {tokens}x{in_dim}->{out_dim} T={tile}: "
              f"{dt * 1e3:8.2f} ms  ({gops:5.2f} Gop/s)")
    if len(runs) == 2:
        assert np.array_equal(runs["compiled"], runs["fallback"]), "backend outputs differ"
        print("  lut_gemm backends bit-identical")


def bench_ssm(tokens: int, d: int, n: int, repeat: int) -> None:
    rng = np.random.default_rng(1)
    abar = np.exp(-rng.uniform(0.001, 0.5, (tokens, d, n))).astype(np.float32)
    dbu = rng.normal(0, 0.1, (tokens, d, n)).astype(np.float32)
    c = rng.normal(0, 1, (tokens, n)).astype(np.float32)

    runs = {}
    for backend in ("fallback", "compiled") if HAVE_COMPILED else ("fallback",):
        runs[backend] = ssm_scan(abar, dbu, c, "f32", backend=backend)
        dt = _time(lambda: ssm_scan(abar, dbu, c, "f32", backend=backend), repeat)
        print(f"  ssm_scan[{backend:8s}] L={tokens} D={d} N={n}: {dt * 1e3:8.2f} ms")
    if len(runs) == 2:
        assert np.array_equal(runs["compiled"], runs["fallback"]), "backend outputs differ"
        print("  ssm_scan backends bit-identical")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--tokens", type=int, default=197)
    ap.add_argument("--tile", type=int, default=32, choices=(16, 32, 64))
    args = ap.parse_args()

    print(f"compiled core available: {HAVE_COMPILED}")
    for in_dim, out_dim in ((192, 384), (384, 768), (768, 80)):
        bench_lut_gemm(args.tokens, in_dim, out_dim, args.tile, args.repeat)
    for d in (384, 768):
        bench_ssm(args.tokens, d, 16, args.repeat)


if __name__ == "__main__":
    main()
