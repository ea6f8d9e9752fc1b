"""Benchmark the numba kernels against the pure-numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--repeats 5]

Covers the five hot kernels at a small (desk) and a larger (training-like)
problem size each. The active backend for library code is controlled by the
LATENTVOL_BACKEND environment variable; this script switches backends
programmatically and reports both.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from latentvol import kernels


def time_call(fn, *args, repeats: int) -> float:
    fn(*args)  # warm-up (includes JIT compilation for the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(rng: np.random.Generator):
    cases = []
    for label, (n, c, o, h, w, d, k) in [
        ("small", (2, 8, 8, 16, 16, 8, 3)),
        ("large", (2, 16, 16, 32, 32, 16, 3)),
    ]:
        xp = rng.normal(size=(n, c, h + 2, w + 2, d + 2))
        wt = rng.normal(size=(o, c, k, k, k))
        ho, wo, do = h, w, d
        gy = rng.normal(size=(n, o, ho + 0, wo + 0, do + 0))
        cases.append((f"conv3d_forward/{label}",
                      lambda xp=xp, wt=wt: kernels.conv3d_forward(xp, wt, 1, 1, 1)))
        cases.append((f"conv3d_backward_x/{label}",
                      lambda gy=gy, wt=wt, s=xp.shape: kernels.conv3d_backward_x(
                          gy, wt, s[2], s[3], s[4], 1, 1, 1)))
        cases.append((f"conv3d_backward_w/{label}",
                      lambda gy=gy, xp=xp: kernels.conv3d_backward_w(gy, xp, 3, 3, 3, 1, 1, 1)))
    for label, (m, kk, dd) in [("small", (1024, 256, 8)), ("large", (8192, 4096, 8))]:
        vecs = rng.normal(size=(m, dd))
        cb = rng.normal(size=(kk, dd))
        cases.append((f"nearest_codes/{label}",
                      lambda vecs=vecs, cb=cb: kernels.nearest_codes(vecs, cb)))
    for label, (h, w, d, m) in [("small", (16, 16, 8, 32)), ("large", (128, 128, 64, 256))]:
        vol = rng.normal(size=(h, w, d))
        u = (np.linspace(0, h - 1, m), np.linspace(0, w - 1, m), np.linspace(0, d - 1, m // 2))
        cases.append((f"trilinear_resample/{label}",
                      lambda vol=vol, u=u: kernels.trilinear_resample(vol, *u)))
    return cases


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = build_cases(rng)
    backends = ["numpy"] + (["numba"] if kernels.numba_available() else [])
    results: dict[str, dict[str, float]] = {}
    for backend in backends:
        kernels.set_backend(backend)
        for name, fn in cases:
            results.setdefault(name, {})[backend] = time_call(fn, repeats=args.repeats)

    width = max(len(n) for n in results)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{b:>10}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, timings in results.items():
        row = f"{name:<{width}}  " + "  ".join(f"{timings[b] * 1e3:>8.2f}ms" for b in backends)
        if len(backends) == 2:
            row += f"  {timings['numpy'] / timings['numba']:>7.2f}x"
        print(row)


if __name__ == "__main__":
    main()
