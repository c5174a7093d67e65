"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel and problem size with the best-of-N wall time of
each path and the speedup.  The first numba call (compilation) is excluded.
"""

import argparse
import time

import numpy as np

from pfdlab import _kernels


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def mixture_case(n, K, rng):
    x = rng.normal(size=(n, 2)) * 3
    return (
        x,
        np.full(n, 1.0),
        rng.uniform(0.01, 4.0, n),
        rng.normal(size=(K, 2)) * 2,
        np.full(K, 0.0225),
        np.log(np.full(K, 1.0 / K)),
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'size':>18}{'numpy [ms]':>14}{'numba [ms]':>14}{'speedup':>10}")
    for n, K in ((1000, 192), (4000, 192), (1000, 1024)):
        case = mixture_case(n, K, rng)
        a = best_of(lambda: _kernels.iso_mixture_numpy(*case), args.repeat)
        b = best_of(lambda: _kernels.iso_mixture_numba(*case), args.repeat)
        print(f"{'mixture':<12}{f'n={n} K={K}':>18}{a * 1e3:>14.2f}{b * 1e3:>14.2f}{a / b:>10.1f}")
    for m, n in ((96 * 96, 1000), (96 * 96, 4000)):
        grid = rng.uniform(-4, 4, (m, 2))
        x = rng.normal(size=(n, 2))
        a = best_of(lambda: _kernels.kde_numpy(grid, x, 0.15), args.repeat)
        b = best_of(lambda: _kernels.kde_numba(grid, x, 0.15), args.repeat)
        print(f"{'kde':<12}{f'grid={m} n={n}':>18}{a * 1e3:>14.2f}{b * 1e3:>14.2f}{a / b:>10.1f}")


if __name__ == "__main__":
    main()
