"""Compiled vs. pure-Python DTW accumulation.

    python benchmarks/bench_kernels.py --sizes 50 100 200 --repeats 5
"""
import argparse
import statistics
import time

import numpy as np

from signdiff import kernels


def _time(fn, cost, repeats):
    fn(cost)  # warmup
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(cost)
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[25, 50, 100, 200, 400])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if kernels.compiled_kernels is None:
        print("compiled extension not built; only the Python kernel is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'T':>6} {'python ms':>12} {'cython ms':>12} {'speedup':>9}")
    for n in args.sizes:
        cost = rng.random((n, n))
        py = _time(kernels.python_kernels.dtw_accumulate, cost, args.repeats)
        if kernels.compiled_kernels is None:
            print(f"{n:>6} {py * 1e3:>12.3f} {'-':>12} {'-':>9}")
            continue
        cy = _time(kernels.compiled_kernels.dtw_accumulate, cost, args.repeats)
        assert kernels.compiled_kernels.dtw_accumulate(cost) == kernels.python_kernels.dtw_accumulate(cost)
        print(f"{n:>6} {py * 1e3:>12.3f} {cy * 1e3:>12.3f} {py / cy:>8.1f}x")


if __name__ == "__main__":
    main()
