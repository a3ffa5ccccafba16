"""Time the numpy and numba kernel backends side by side, plus two end-to-end runs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 4000]

End-to-end timings run in subprocesses with MVCASCADE_BACKEND set, since the
backend is fixed at import.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mvcascade import kernels


def kernel_cases(n: int, cells: int):
    rng = np.random.default_rng(0)
    X = rng.uniform(0.0, 2.0, n)
    alive = np.ones(n, dtype=bool)
    U, V = rng.uniform(0, 1, (n, 2)), rng.uniform(0, 1, (n, 2))
    g, I = np.ones(n), np.zeros(n)
    crossed = rng.random(n) < 0.01
    row = rng.random(cells)
    hk = kernels.heat_kernel(0.03, 0.005)
    return {
        "diffuse": lambda f: f(X.copy(), alive, np.zeros(n), np.ones(n), 0.3, 0.01,
                               rng.standard_normal(n), 1e-3, True, rng.random(n),
                               np.zeros(n, dtype=bool)),
        "cascade_discrete": lambda f: f(X * 0.05, alive, crossed, U, V, g, I, 0, 1.0, 0.0,
                                        1.0 / n, np.zeros(n, dtype=bool), np.zeros(2)),
        "remap_shift": lambda f: f(row, 0.005, 0.0123, np.empty(cells)),
        "convolve_heat": lambda f: f(row, hk, True, np.empty(cells)),
        "cum_mass": lambda f: f(row, 0.005, 0.37),
    }


E2E = {
    "particles n=4000, T=0.5": (
        "from mvcascade.model import homogeneous_spec\n"
        "from mvcascade.densities import Uniform\n"
        "from mvcascade.particles import simulate\n"
        "simulate(homogeneous_spec(0.8, Uniform(0, 1), horizon=0.05), 200, 1e-3, seed=0)\n"
        "import time; t = time.perf_counter()\n"
        "simulate(homogeneous_spec(0.8, Uniform(0, 1), horizon=0.5), 4000, 1e-3, seed=0)\n"
        "print(time.perf_counter() - t)\n"),
    "mean field h=5e-3, T=0.5": (
        "from mvcascade.model import homogeneous_spec\n"
        "from mvcascade.densities import Uniform\n"
        "from mvcascade.meanfield import solve\n"
        "solve(homogeneous_spec(0.8, Uniform(0, 1), horizon=0.01), 0.005, 1e-3)\n"
        "import time; t = time.perf_counter()\n"
        "solve(homogeneous_spec(0.8, Uniform(0, 1), horizon=0.5), 0.005, 1e-3)\n"
        "print(time.perf_counter() - t)\n"),
}


def run_e2e(code: str, backend: str) -> float:
    env = {**os.environ, "MVCASCADE_BACKEND": backend}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    return float(out.stdout.strip())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=4000, help="particles per kernel call")
    ap.add_argument("--cells", type=int, default=2000, help="grid cells per kernel call")
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
        return 1

    print(f"{'kernel':<20}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, call in kernel_cases(args.n, args.cells).items():
        call(kernels.NUMBA_IMPLS[name])  # compile outside the timing
        t = {}
        for label, impls in (("numpy", kernels.NUMPY_IMPLS), ("numba", kernels.NUMBA_IMPLS)):
            f = impls[name]
            t[label] = min(timeit.repeat(lambda: call(f), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t['numpy']:>12.3f}{t['numba']:>12.3f}{t['numpy'] / t['numba']:>9.1f}x")

    if not args.skip_e2e:
        print(f"\n{'end to end':<28}{'numpy [s]':>11}{'numba [s]':>11}{'speedup':>10}")
        for name, code in E2E.items():
            a, b = run_e2e(code, "numpy"), run_e2e(code, "numba")
            print(f"{name:<28}{a:>11.2f}{b:>11.2f}{a / b:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
