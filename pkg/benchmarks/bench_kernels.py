"""Time the compiled DBSCAN kernel against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--sizes 64 256 750] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from picl import _backend, _kernels_py
from picl.clustering import DbscanParams, dbscan


def make_points(n, dim=64, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(max(2, n // 50), dim))
    x = centers[rng.integers(len(centers), size=n)] + 0.05 * rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 750, 1500])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    params = DbscanParams(eps=0.005, min_pts=4)
    backends = [("python", _kernels_py)]
    if _backend.compiled_kernels is None:
        print("compiled extension not built; timing the fallback only")
    else:
        backends.append(("cython", _backend.compiled_kernels))

    print(f"{'n':>6} " + " ".join(f"{name + ' ms':>11}" for name, _ in backends) + "  speedup")
    for n in args.sizes:
        x = make_points(n)
        ref = dbscan(x, params, _kernels_py).labels
        times = []
        for _, k in backends:
            assert np.array_equal(dbscan(x, params, k).labels, ref)
            best = min(timeit.repeat(lambda: dbscan(x, params, k), number=1, repeat=args.repeat))
            times.append(1e3 * best)
        speed = f"{times[0] / times[1]:7.1f}x" if len(times) == 2 else "      -"
        print(f"{n:6d} " + " ".join(f"{t:11.2f}" for t in times) + "  " + speed)


if __name__ == "__main__":
    main()
