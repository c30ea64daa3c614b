"""Benchmark the hot kernels under both engines (numba vs pure numpy).

The engine is chosen at import time from MAXSMOOTH_NUMBA, so this script
re-executes itself in a child process per engine and combines the results.

Usage: python benchmarks/kernel_bench.py [--repeats N] [--json OUT]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _bench_engine(repeats):
    from maxsmooth import gmrf, sparse
    from maxsmooth._engine import engine_name
    from maxsmooth.exact import exact_mcmc_logvar

    results = {"engine": engine_name()}

    def timeit(fn, n=repeats):
        fn()  # warm up (numba compilation, caches)
        best = float("inf")
        for _ in range(n):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return best

    for n1, n2 in ((30, 30), (50, 50)):
        q = gmrf.lattice_structure(n1, n2, "zero").scale(1.0).add_diag(0.1)
        b = np.random.default_rng(0).standard_normal(n1 * n2)
        factor = sparse.chol(q)
        results[f"band_chol_{n1}x{n2}"] = timeit(lambda q=q: sparse.chol(q))
        results[f"band_solve_{n1}x{n2}"] = timeit(
            lambda f=factor, b=b: sparse.solve(f, b)
        )

    rng = np.random.default_rng(7)
    y = np.exp(0.25 * rng.standard_normal(400))[:, None] * rng.standard_normal(
        (400, 100)
    )
    t0 = time.perf_counter()
    exact_mcmc_logvar(
        y, 20, 20, n_draws=200, rng=np.random.default_rng(1),
        pilot_sweeps=50, burnin=50,
    )
    results["logvar_sweep_20x20_T100_300draws"] = time.perf_counter() - t0
    return results


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--json", help="also write results to this path")
    parser.add_argument("--engine-run", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.engine_run:
        json.dump(_bench_engine(args.repeats), sys.stdout)
        return

    rows = []
    for flag in ("1", "0"):
        env = dict(os.environ, MAXSMOOTH_NUMBA=flag)
        try:
            out = subprocess.run(
                [sys.executable, __file__, "--engine-run",
                 "--repeats", str(args.repeats)],
                env=env, capture_output=True, text=True, check=True,
            )
        except subprocess.CalledProcessError as exc:
            if flag == "1":
                print("numba engine unavailable, skipping:", exc.stderr.strip())
                continue
            raise
        rows.append(json.loads(out.stdout))

    keys = [k for k in rows[0] if k != "engine"]
    width = max(len(k) for k in keys)
    header = f"{'kernel':<{width}} " + " ".join(f"{r['engine']:>12}" for r in rows)
    print(header)
    print("-" * len(header))
    for k in keys:
        line = f"{k:<{width}} " + " ".join(f"{r[k]:>12.5f}" for r in rows)
        if len(rows) == 2 and rows[1][k] > 0:
            line += f"   x{rows[1][k] / max(rows[0][k], 1e-12):.1f}"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
        print(f"wrote {args.json}")


if __name__ == "__main__":
    main()
