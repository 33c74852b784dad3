"""Compiled vs pure-Python kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Times the FH solve kernel, the weight-fit kernel and a full closed-loop run.
The full run is timed in a subprocess per backend because the backend is fixed
at import (``MLVI_MPC_PURE_PYTHON=1`` forces the fallback).
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mlvi_mpc import kernels
from mlvi_mpc.model import CASE_B, CASE_LEFT, CASE_Q, CASE_R, CASE_RIGHT

FULL_RUN = """
import json, time
from mlvi_mpc import kernels
from mlvi_mpc.loop import RunConfig, run
cfg = RunConfig(x0=(-3.0, -4.0), horizon={N}, n_sim=14)
run(cfg)
best = min((lambda t0: (run(cfg), time.perf_counter() - t0)[1])(time.perf_counter()) for _ in range({repeat}))
print(json.dumps({{"backend": kernels.BACKEND, "seconds": best}}))
"""


def bench(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_rows(repeat):
    rows = []
    args = (CASE_LEFT, CASE_RIGHT, CASE_B, CASE_Q, CASE_R, np.array([[5.0, 1.0], [1.0, 3.0]]))
    x0 = np.array([-3.0, -4.0])
    phi = np.array([9.0, 12.0, 16.0])
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    for name in backends:
        impl = kernels.get_backend(name)
        for N in (3, 4, 8):
            t = bench(lambda: impl.rotquad_solve(x0, np.zeros((N, 1)), *args), repeat, 20)
            rows.append(("rotquad_solve", f"N={N}", name, t))
        t = bench(lambda: impl.gd_fit(np.zeros(3), phi, 40.0, 0.1 / (phi @ phi), 1e-8, 10_000), repeat, 20)
        rows.append(("gd_fit", "eta=0.1/|phi|^2", name, t))
    return rows


def full_run_rows(repeat):
    rows = []
    for pure in (True, False):
        if not pure and not kernels.compiled_available():
            continue
        env = dict(os.environ)
        env.pop("MLVI_MPC_PURE_PYTHON", None)
        if pure:
            env["MLVI_MPC_PURE_PYTHON"] = "1"
        for N in (3, 4):
            out = subprocess.run([sys.executable, "-c", FULL_RUN.format(N=N, repeat=repeat)], env=env,
                                 capture_output=True, text=True, check=True)
            res = json.loads(out.stdout)
            rows.append(("closed-loop run", f"N={N}, 14 steps", res["backend"], res["seconds"]))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rows = kernel_rows(args.repeat) + full_run_rows(args.repeat)
    print(f"{'kernel':<16} {'case':<18} {'backend':<8} {'time':>12}")
    for kern, case, backend, t in rows:
        print(f"{kern:<16} {case:<18} {backend:<8} {t * 1e3:>9.3f} ms")
    by = {}
    for kern, case, backend, t in rows:
        by.setdefault((kern, case), {})[backend] = t
    print()
    for (kern, case), d in by.items():
        if "python" in d and "cython" in d:
            print(f"speedup {kern} {case}: {d['python'] / d['cython']:.1f}x")


if __name__ == "__main__":
    main()
