"""Time the compiled kernels against the numpy fallback on identical inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is also checked for identical output across backends before timing.
"""

import argparse
import timeit

import numpy as np
from scipy.spatial import cKDTree

from ovpano.kernels import available_backends


def splat_case(rng, n=200_000, size=512):
    px = rng.integers(0, size, n)
    py = rng.integers(0, size, n)
    depth = rng.uniform(0.5, 10.0, n)
    return (px, py, depth, size, size, 1)


def accumulate_case(rng, n=1_000_000, n_out=50_000, dim=32):
    return (rng.integers(0, n_out, n), rng.normal(size=(n, dim)), n_out)


def dbscan_case(rng, n=20_000):
    pos = rng.normal(size=(n, 3)) * [4, 4, 1]
    nbrs = cKDTree(pos).query_ball_point(pos, 0.25, return_sorted=True)
    indptr = np.r_[0, np.cumsum([len(a) for a in nbrs])].astype(np.int64)
    indices = np.fromiter((j for a in nbrs for j in a), dtype=np.int64, count=int(indptr[-1]))
    return (indptr, indices, 5)


CASES = {
    "splat_zbuffer": splat_case,
    "segment_accumulate": accumulate_case,
    "dbscan_core_labels": dbscan_case,
}


def same_output(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the fallback is available")
    print(f"{'kernel':<20} " + " ".join(f"{name:>12}" for name in backends) + "   speedup  same")
    for name, make in CASES.items():
        inputs = make(np.random.default_rng(args.seed))
        outputs, best = {}, {}
        for backend, mod in backends.items():
            fn = getattr(mod, name)
            outputs[backend] = fn(*inputs)
            best[backend] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat))
        row = f"{name:<20} " + " ".join(f"{best[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in best:
            agree = same_output(outputs["python"], outputs["cython"])
            row += f"   {best['python'] / best['cython']:>6.2f}x  {'yes' if agree else 'NO'}"
        print(row)


if __name__ == "__main__":
    main()
