"""Compare the compiled branch kernel against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--branches N] [--repeat R]

Solves the same batch of random branch subproblems with both backends and
reports wall time per subproblem and the largest difference between the
solutions. A full case9 ADMM solve under each backend is timed as well.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rladmm import _kernels_py
from rladmm.netdata import compute_admittance

try:
    from rladmm import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def random_batch(n, seed=0):
    rng = np.random.default_rng(seed)
    adm = np.array([compute_admittance(rng.uniform(0, 0.04), rng.uniform(0.05, 0.2),
                                       rng.uniform(0, 0.4)) for _ in range(n)])
    u = np.column_stack([rng.uniform(0.85, 1.15, (n, 2)), rng.uniform(-0.3, 0.3, (n, 2))])
    lo = np.tile([0.81, 0.81, -2 * np.pi, -2 * np.pi], (n, 1))
    hi = np.tile([1.21, 1.21, 2 * np.pi, 2 * np.pi], (n, 1))
    xbar = np.column_stack([rng.normal(size=(n, 4)), rng.uniform(0.85, 1.15, (n, 2)),
                            rng.uniform(-0.3, 0.3, (n, 2))])
    y = rng.normal(scale=20, size=(n, 8))
    rho = np.column_stack([rng.uniform(100, 1000, (n, 4)), rng.uniform(500, 70000, (n, 4))])
    rate2 = np.full(n, 2.5 ** 2)
    return u, lo, hi, adm, xbar, y, rho, rate2


def run(mod, batch, repeat):
    best = np.inf
    for _ in range(repeat):
        u = batch[0].copy()
        n = len(u)
        z, it, st = np.zeros((n, 8)), np.zeros(n, np.int64), np.zeros(n, np.int64)
        t0 = time.perf_counter()
        mod.solve_branches(u, *batch[1:], 1e3, 1e-8, 200, z, it, st)
        best = min(best, time.perf_counter() - t0)
    return best, u, it


def time_solve(pure: bool) -> str:
    env = dict(os.environ)
    if pure:
        env["RLADMM_PURE_PYTHON"] = "1"
    code = ("import time; from rladmm.engine import Engine, FixedPolicy, run_episode;"
            "from rladmm.netdata import load_case; from rladmm import kernels;"
            "e = Engine(load_case('case9')); t = time.perf_counter();"
            "r = run_episode(e, FixedPolicy());"
            "print(kernels.BACKEND, r.iterations, round(time.perf_counter() - t, 2))")
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                          text=True, check=True).stdout.strip()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--branches", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--skip-solve", action="store_true")
    args = ap.parse_args()
    batch = random_batch(args.branches)
    t_py, u_py, it_py = run(_kernels_py, batch, 1)
    print(f"python : {t_py / args.branches * 1e6:9.1f} us/branch "
          f"(mean {it_py.mean():.1f} TR iterations)")
    if compiled is None:
        print("compiled kernel not built; run `pip install -e . --no-build-isolation`")
        return
    t_c, u_c, it_c = run(compiled, batch, args.repeat)
    print(f"cython : {t_c / args.branches * 1e6:9.1f} us/branch "
          f"(mean {it_c.mean():.1f} TR iterations)")
    print(f"speedup: {t_py / t_c:.1f}x; max |u_cython - u_python| = "
          f"{np.max(np.abs(u_c - u_py)):.2e}")
    if not args.skip_solve:
        print("case9 solve (backend, iterations, seconds):")
        print("  " + time_solve(False))
        print("  " + time_solve(True))


if __name__ == "__main__":
    main()
