"""Time the compiled kernels against the numpy fallback.

Usage: ``python benchmarks/bench_kernels.py [--size N] [--repeat R]``.
"""

import argparse
import timeit

import numpy as np

from misa import _kernels_py, kernels


def cases(x, g):
    return {
        "elu": lambda impl: kernels.elu(x, impl),
        "elu_grad": lambda impl: kernels.elu_grad(x, g, impl),
        "logsumexp_last": lambda impl: kernels.logsumexp_last(x, impl),
        "softmax_last": lambda impl: kernels.softmax_last(x, impl=impl),
        "squash_logdet": lambda impl: kernels.squash_logdet(x, impl),
        "squash_logdet_grad": lambda impl: kernels.squash_logdet_grad(x, g, impl),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=256 * 50)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.size, args.width))
    g = rng.standard_normal((args.size, args.width))
    try:
        from misa import _kernels as compiled
    except ImportError:
        compiled = None
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':20s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(x, g).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:20s} {py:10.3f} {'-':>12s} {'-':>8s}")
            continue
        np.testing.assert_allclose(fn(compiled), fn(_kernels_py), rtol=1e-9, atol=1e-12)
        cy = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:20s} {py:10.3f} {cy:12.3f} {py / cy:8.2f}")


if __name__ == "__main__":
    main()
