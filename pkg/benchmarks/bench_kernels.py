"""Time the compiled kernels against the numpy fallback on pipeline-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from octcvd import _backend


def cases(rng):
    n, d = 1500, 20
    X = rng.standard_normal((n, d))
    y = (X[:, 0] + 0.5 * rng.standard_normal(n) > 0).astype(np.int8)
    Xt = np.ascontiguousarray(X.T)
    counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.int64)
    x4 = rng.random((16, 16, 64, 64))
    ho = wo = 32
    cols = rng.random((16, 16 * 16, ho * wo))
    ix, iy, it = (rng.standard_normal((64, 64)) for _ in range(3))

    def tree(k):
        return k.build_tree(Xt, y, counts, 8, 1, 4, 1.0, 1.0, 7)

    grown = tree(_backend.fallback)
    return {
        "build_tree": tree,
        "apply_tree": lambda k: k.apply_tree(X, *grown[:4]),
        "im2col": lambda k: k.im2col(x4, 4, 2, 1, ho, wo),
        "col2im": lambda k: k.col2im(cols, 16, 64, 64, 4, 2, 1, ho, wo),
        "lk_solve": lambda k: k.lk_solve(ix, iy, it, 15, 1e-4),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _backend.NAME != "compiled":
        raise SystemExit("compiled extension not available; build it with pip install -e .")
    impls = {"compiled": _backend.kernels, "python": _backend.fallback}
    print(f"{'kernel':<12}{'compiled ms':>14}{'python ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        best = {}
        for label, k in impls.items():
            fn(k)
            best[label] = min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<12}{best['compiled']:>14.2f}{best['python']:>12.2f}"
              f"{best['python'] / best['compiled']:>9.1f}x")


if __name__ == "__main__":
    main()
