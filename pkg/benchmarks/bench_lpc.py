"""Benchmark the LPC kernel backends: numba @njit vs pure numpy.

    python benchmarks/bench_lpc.py [--repeats 5]

The numba path is what workers run by default; EDGRID_PURE_NUMPY=1 selects
the numpy path at import time. Both are timed here directly, JIT warmup
excluded.
"""

import argparse
import time

import numpy as np

from edgrid.marf import kernels


CASES = (
    ("short sample", 2048, 128, 12),
    ("medium sample", 16384, 128, 20),
    ("long sample", 131072, 256, 20),
)


def time_backend(fn, data, window_len, poles, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(data, window_len, poles)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = [("numpy", kernels.lpc_average_numpy)]
    if kernels.lpc_average_numba is not None:
        kernels.lpc_average_numba(np.zeros(64), 16, 4)  # compile outside timing
        backends.append(("numba", kernels.lpc_average_numba))
    else:
        print("numba backend unavailable (EDGRID_PURE_NUMPY set or import failed)")

    rng = np.random.default_rng(0)
    print("%-14s %8s %6s  %s" % ("case", "samples", "poles",
                                 "  ".join("%10s" % name for name, _ in backends)))
    for label, n, window_len, poles in CASES:
        data = rng.normal(size=n)
        row = []
        results = []
        for _, fn in backends:
            row.append(time_backend(fn, data, window_len, poles, args.repeats))
            results.append(fn(data, window_len, poles))
        for other in results[1:]:
            assert np.max(np.abs(other - results[0])) < 1e-9, "backends disagree"
        cells = "  ".join("%9.3fms" % (t * 1000) for t in row)
        print("%-14s %8d %6d  %s" % (label, n, poles, cells))
        if len(row) == 2 and row[1] > 0:
            print("%-14s %8s %6s  speedup numba vs numpy: %.1fx"
                  % ("", "", "", row[0] / row[1]))


if __name__ == "__main__":
    main()
