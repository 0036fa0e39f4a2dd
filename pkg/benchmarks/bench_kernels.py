#!/usr/bin/env python3
"""Compare the numba and numpy variants of the hot kernels.

Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from flexact import kernels, lp, netmodel
from flexact.config import data_path


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_sweep(repeat):
    model = netmodel.load_network(data_path("feeder41.json"))
    profiles = netmodel.load_profiles(data_path("profiles41.csv"), model)
    loads = profiles.net_load(model)
    topo, z, v0 = model.topology, model.z_pu, model.slack_phasors()

    def run(use_numba):
        for s in loads:
            kernels.sweep(topo, z, s, v0, 1e-10, 100, use_numba=use_numba)

    run(True)  # compile / load cache
    t_nb = _best(lambda: run(True), repeat)
    t_np = _best(lambda: run(False), repeat)
    va = kernels.sweep(topo, z, loads[12], v0, 1e-10, 100, use_numba=True)[0]
    vb = kernels.sweep(topo, z, loads[12], v0, 1e-10, 100, use_numba=False)[0]
    assert np.allclose(va, vb, atol=1e-9)
    n = len(loads)
    print(f"sweep ({n} snapshots, {model.n_bus} buses)")
    print(f"  numba: {1e3 * t_nb / n:8.3f} ms/solve")
    print(f"  numpy: {1e3 * t_np / n:8.3f} ms/solve")
    print(f"  speedup: {t_np / t_nb:.1f}x")


def bench_simplex(repeat, n=150, m=120, seed=0):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(0, 1, n)
    b = A @ x0 + rng.uniform(0, 0.5, m)
    upper = rng.uniform(1, 2, n)

    def run(use_numba):
        return lp.SimplexBackend(use_numba=use_numba).solve(c, A, b, upper=upper)

    run(True)
    t_nb = _best(lambda: run(True), repeat)
    t_np = _best(lambda: run(False), repeat)
    r_nb, r_np = run(True), run(False)
    assert abs(r_nb.objective - r_np.objective) < 1e-8
    print(f"simplex ({m} rows x {n} cols, {r_nb.iterations} pivots)")
    print(f"  numba: {1e3 * t_nb:8.3f} ms/solve")
    print(f"  numpy: {1e3 * t_np:8.3f} ms/solve")
    print(f"  speedup: {t_np / t_nb:.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    bench_sweep(args.repeat)
    bench_simplex(args.repeat)


if __name__ == "__main__":
    main()
