"""Time the compiled scoring kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--bank 2048] [--queries 1000] [--dim 8] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from dtd import kernels
from dtd.scoring_np import iforest_fit, silverman_bandwidth


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--bank", type=int, default=2048)
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    gen = np.random.default_rng(0)
    bank = gen.normal(size=(args.bank, args.dim))
    X = gen.normal(size=(args.queries, args.dim))
    h = silverman_bandwidth(bank)
    forest = iforest_fit(bank, n_trees=100, psi=256, seed=0)
    tree_args = (forest.feature, forest.threshold, forest.left, forest.right, forest.size, forest.roots)

    backends = {"python": kernels.python_backend}
    if kernels.compiled_backend is not None:
        backends["compiled"] = kernels.compiled_backend
    else:
        print("compiled extension not built; timing the python backend only")

    cases = {
        "kde": lambda be: be.kde_scores(X, bank, h),
        "knn": lambda be: be.knn_scores(X, bank, args.k),
        "iforest": lambda be: be.iforest_path_lengths(X, *tree_args),
    }
    print(f"bank {args.bank} x {args.dim}, {args.queries} queries, best of {args.repeat}")
    print(f"{'kernel':<10}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for case, fn in cases.items():
        times = {name: min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
                 for name, be in backends.items()}
        ref = fn(backends["python"])
        for name, be in backends.items():
            assert np.allclose(fn(be), ref, rtol=1e-10, atol=0), f"{case}: {name} disagrees"
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{case:<10}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times.values()) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
