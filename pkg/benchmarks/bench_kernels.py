"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from muscle import _kernels_py as py

try:
    from muscle import _ckernels as cy
except ImportError:
    cy = None


def cases(rng):
    x = rng.normal(size=(8, 32, 32, 32))
    cols = py.im2col(x, 3, 3, 1, 1)
    costs = rng.uniform(size=(48, 9, 9))
    la = np.log(rng.dirichlet(np.ones(9), size=48))
    lb = np.log(rng.dirichlet(np.ones(9), size=48))
    return {
        "im2col 8x32x32x32 k3": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im 8x32x32x32 k3": lambda m: m.col2im(cols, 32, 32, 32, 3, 3, 1, 1),
        "sinkhorn 48x(9x9) eps=0.01": lambda m: m.sinkhorn_log(costs, la, lb, 0.01, 500, 1e-6),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:32s} {t_py:10.2f} {'n/a':>10s} {'n/a':>8s}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
