"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from adaptinf import env
from adaptinf._kernels import _fallback
from adaptinf.nuisance import PoolGeometry

try:
    from adaptinf._kernels import _core
except ImportError:
    _core = None


def cases(rng):
    pool = env.synthetic_pool(500, 5, seed=0)
    geo = PoolGeometry(pool)
    K = 4
    counts = rng.integers(0, 4, size=(K, pool.n)).astype(float)
    sum1 = counts * rng.standard_normal((K, pool.n))
    sum2 = counts * (1.0 + sum1 ** 2)
    rows = np.arange(pool.n, dtype=np.int64)
    train = rng.standard_normal((2000, 5))
    y = rng.standard_normal(2000)
    query = rng.standard_normal((500, 5))
    mean = rng.standard_normal((500, K))
    sd = rng.uniform(0.05, 0.5, (500, K))
    draws = rng.standard_normal((2000, K))
    return {
        "knn_pool_predict (500 rows, K=4, k=25)":
            ("knn_pool_predict", (geo.order, geo.sdist, counts, sum1, sum2, rows, 25)),
        "knn_brute_predict (2000 train, 500 queries, k=25)":
            ("knn_brute_predict", (train, y, query, 25)),
        "thompson_probs (500 contexts, K=4, 2000 draws)":
            ("thompson_probs", (mean, sd, draws)),
    }


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<52} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for label, (name, inputs) in cases(rng).items():
        t_py = best_time(getattr(_fallback, name), inputs, args.repeat)
        if _core is None:
            print(f"{label:<52} {1e3 * t_py:>10.2f} {'n/a':>12} {'n/a':>8}")
            continue
        a, b = getattr(_core, name)(*inputs), getattr(_fallback, name)(*inputs)
        a, b = (a,) if isinstance(a, np.ndarray) else a, (b,) if isinstance(b, np.ndarray) else b
        diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(z)))) for x, z in zip(a, b))
        t_c = best_time(getattr(_core, name), inputs, args.repeat)
        print(f"{label:<52} {1e3 * t_py:>10.2f} {1e3 * t_c:>12.2f} {t_py / t_c:>7.1f}x  (max diff {diff:.1e})")


if __name__ == "__main__":
    main()
