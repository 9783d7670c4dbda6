"""Compare the compiled kernels with the numpy fallback.

Times one right-hand-side evaluation and a block of fixed RK4 steps for
several student widths, and reports the speedup of the compiled backend.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--steps 200]
"""

import argparse
import timeit

import numpy as np

from meta_lab import _backend
from meta_lab.order_params import OrderParams


def _make(module, K, M=3):
    init = OrderParams.uniform(K, M, r0=0.05)
    T = np.diag(np.arange(1.0, M + 1))
    rhs = module.Rhs(K, T, 3.0, 9.0, 0.01)
    return rhs, np.array(init.Q), np.array(init.R)


def bench(module, K, repeat, steps):
    rhs, Q, R = _make(module, K)
    t_call = min(timeit.repeat(lambda: rhs(Q, R), number=20, repeat=repeat)) / 20

    def block():
        q, r = Q.copy(), R.copy()
        rhs.rk4(q, r, 0.01, steps)

    t_rk4 = min(timeit.repeat(block, number=1, repeat=repeat)) / steps
    return t_call, t_rk4


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--widths", type=int, nargs="+", default=[3, 6, 9])
    args = parser.parse_args(argv)
    if _backend.compiled is None:
        raise SystemExit("compiled kernel not built; install with `pip install -e . --no-build-isolation`")
    print(f"{'K':>3} {'backend':>9} {'rhs [us]':>10} {'rk4 step [us]':>14} {'speedup':>8}")
    for K in args.widths:
        fast = bench(_backend.compiled, K, args.repeat, args.steps)
        slow = bench(_backend.fallback, K, args.repeat, args.steps)
        for name, (tc, ts) in (("numpy", slow), ("compiled", fast)):
            speed = slow[1] / ts
            print(f"{K:>3} {name:>9} {tc * 1e6:>10.1f} {ts * 1e6:>14.1f} {speed:>7.1f}x")


if __name__ == "__main__":
    main()
