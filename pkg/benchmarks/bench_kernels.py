"""Time the compiled and numpy estimating-function kernels on the same inputs.

Usage: python3 benchmarks/bench_kernels.py [--n 1000 37842] [--repeat 20]

At simulation sizes (n of about 1000) per-call overhead dominates and the
compiled kernels win clearly; at the full fixture size both spend most of
their time in ``exp`` and run at similar speed.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from ivodds import _kernels
from ivodds.data import expand_table, load_fixture
from ivodds.iv import build_smm_problem


def inputs(n: int | None):
    data = expand_table(load_fixture("brookhart"))
    if n is not None and n != data.n:
        rng = np.random.default_rng(0)
        idx = rng.integers(0, data.n, size=n)
        data = type(data)(data.y[idx], data.x[idx], data.z[idx])
    return build_smm_problem(data).kernel_args()


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[1000, 37842], help="rows resampled from the fixture")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    for n in args.n:
        run(n, args.repeat)


def run(n: int, repeat: int) -> None:
    lin, xs, r = inputs(n)
    grid = np.arange(-10.0, 10.0 + 1e-9, 0.25)
    u = _kernels.ee_grid(lin, xs, r, grid)
    k = int(np.flatnonzero(np.sign(u[:-1]) * np.sign(u[1:]) < 0)[0])
    lo, hi = grid[k], grid[k + 1]
    cases = {
        "ee_value": lambda b: _kernels.ee_value(lin, xs, r, lo, backend=b),
        "ee_grid": lambda b: _kernels.ee_grid(lin, xs, r, grid, backend=b),
        "brent": lambda b: _kernels.brent(lin, xs, r, lo, hi, backend=b),
    }
    names = sorted(_kernels.BACKENDS)
    print(f"n={lin.size} backends={names} default={_kernels.BACKEND}")
    print(f"{'kernel':<10}" + "".join(f"{b + ' (ms)':>16}" for b in names) + f"{'speedup':>10}")
    for case, fn in cases.items():
        ms = {b: 1e3 * min(timeit.repeat(lambda: fn(b), number=1, repeat=repeat)) for b in names}
        ratio = ms["numpy"] / ms["cython"] if "cython" in ms else float("nan")
        print(f"{case:<10}" + "".join(f"{ms[b]:>16.3f}" for b in names) + f"{ratio:>10.1f}")
    vals = [_kernels.brent(lin, xs, r, lo, hi, backend=b)[0] for b in names]
    print("brent roots agree:", np.allclose(vals, vals[0], atol=1e-10, rtol=0))
    print()


if __name__ == "__main__":
    main()
