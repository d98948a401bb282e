"""Time the compiled and pure-Python coordinate-descent kernels.

Usage: python benchmarks/bench_cd.py [--sizes 20 60 150] [--repeat 3]

Each problem runs a 100-point LASSO path (lambda_max down to 1e-3 of it)
on a standardised Gaussian design with correlated columns, the same work a
single cross-validation fold does inside the DML nuisance fits.
"""
import argparse
import time

import numpy as np

from dmlrc import _cd_py

try:
    from dmlrc import _cd_ext
except ImportError:
    _cd_ext = None


def make_problem(p, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(n, p))
    X = base + 0.5 * base[:, [0]]
    X = (X - X.mean(0)) / X.std(0)
    y = X[:, : max(1, p // 5)].sum(axis=1) + rng.normal(size=n)
    gram, corr = X.T @ X / n, X.T @ (y - y.mean()) / n
    lambdas = np.abs(corr).max() * np.geomspace(1, 1e-3, 100)
    return gram, corr, lambdas


def best_time(fn, gram, corr, lambdas, repeat):
    best = np.inf
    for _ in range(repeat):
        beta = np.zeros(corr.size)
        t0 = time.perf_counter()
        fn(gram, corr, lambdas, beta, 1e-8, 10_000)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[20, 60, 150])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    print(f"{'p':>5} {'python [s]':>12} {'cython [s]':>12} {'speedup':>8}")
    for p in args.sizes:
        prob = make_problem(p)
        t_py = best_time(_cd_py.cd_path, *prob, args.repeat)
        if _cd_ext is None:
            print(f"{p:>5} {t_py:>12.4f} {'n/a':>12} {'n/a':>8}")
            continue
        t_c = best_time(_cd_ext.cd_path, *prob, args.repeat)
        print(f"{p:>5} {t_py:>12.4f} {t_c:>12.4f} {t_py / t_c:>7.0f}x")


if __name__ == "__main__":
    main()
