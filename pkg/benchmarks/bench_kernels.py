"""Compare the compiled and numpy reconstruction kernels.

Usage: python3 benchmarks/bench_kernels.py [--patches 64] [--batch 256] [--repeat 20]

Prints milliseconds per call for each available backend and the largest
absolute difference between their outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vitssl import kernels
from vitssl.data import build_spec, draw_batch


def time_backend(backend: str, args, W, spec, batch) -> tuple[float, kernels.KernelResult]:
    call = lambda: kernels.mae_masked_terms(  # noqa: E731
        W, spec.area_index, spec.num_areas, batch.cluster, batch.z, batch.unmasked, batch.weight, args.pp, backend=backend
    )
    res = call()
    best = float("inf")
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        call()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3, res


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--patches", type=int, default=64)
    ap.add_argument("--clusters", type=int, default=2)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--pp", action="store_true", help="also accumulate per-cluster position pieces")
    args = ap.parse_args()

    spec = build_spec(args.patches, args.clusters, 0.9, 0.35, seed=0)
    rng = np.random.default_rng(0)
    batch = draw_batch(spec, args.batch, 0.5, rng)
    W = 0.3 * rng.standard_normal((spec.num_patches, spec.dim))

    results = {}
    for backend in kernels.available_backends():
        ms, res = time_backend(backend, args, W, spec, batch)
        results[backend] = res
        print(f"{backend:>7}: {ms:8.2f} ms per call (P={args.patches}, B={args.batch})")
    if len(results) == 2:
        a, b = results["cython"], results["numpy"]
        diff = max(np.abs(a.loss - b.loss).max(), np.abs(a.grad - b.grad).max())
        print(f"max abs difference between backends: {diff:.2e}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
