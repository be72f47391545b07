"""Time the numba and numpy paths of each kernel on representative sizes.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time of each path and the
speedup.  Compilation is triggered before timing.
"""

import argparse
import timeit

import numpy as np

from pmcast import _kernels as K


def cases(rng):
    # one semi-Lagrangian step of six tracers on the 5.625 degree grid
    field = rng.normal(size=(6, 32, 64))
    yi = rng.uniform(-1, 33, 32 * 64)
    xi = rng.uniform(-5, 70, 32 * 64)
    yield "sample_bilinear", (field, yi, xi, True)
    # frequency-weight lookup for a batch of 32 x 12 AQ channels on the MENA crop
    edges = np.sort(rng.normal(size=200))
    values = rng.normal(size=32 * 12 * 8 * 14)
    yield "bin_lookup", (values, edges)
    err = rng.normal(size=(32, 12, 8, 14))
    yield "weighted_abs_sums", (err, rng.uniform(0.5, 1.5, 8), rng.uniform(size=err.shape))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':20s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, a in cases(rng):
        fast = getattr(K, name + "_numba")
        slow = getattr(K, name + "_numpy")
        fast(*a)  # compile
        t_fast = min(timeit.repeat(lambda: fast(*a), repeat=args.repeat, number=args.number)) / args.number
        t_slow = min(timeit.repeat(lambda: slow(*a), repeat=args.repeat, number=args.number)) / args.number
        print(f"{name:20s} {t_fast * 1e3:10.3f} {t_slow * 1e3:10.3f} {t_slow / t_fast:8.2f}")


if __name__ == "__main__":
    main()
