"""Solve the enzyme benchmark in each formulation and print the pairwise gaps.

Usage: python3 scripts/reproduce_benchmark.py [--eps 1e-2 1e-3] [--N 20]
"""

import argparse

from simocp.model import registry_get
from simocp.ocp import OcpProblem, compare_formulations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eps", type=float, nargs="+", default=[1e-2, 1e-3])
    ap.add_argument("--N", type=int, default=20)
    ap.add_argument("--formulations", nargs="+", default=["full", "lifted", "reduced"])
    args = ap.parse_args()

    for eps in args.eps:
        entry = registry_get("mmh-ocp", eps)
        out = compare_formulations(OcpProblem.from_benchmark(entry, "full", N=args.N),
                                   args.formulations)
        print(f"eps = {eps:g}, N = {args.N}")
        for tag, sol in out["solutions"].items():
            t = sol.wall_time_seconds["total"]
            print(f"  {tag:8s} J = {sol.objective: .10f}  iters {sol.nlp.iterations:3d}  "
                  f"implicit steps {sol.stats.implicit_steps:6d}  {t:6.2f} s")
        for tag, msg in out["failures"].items():
            print(f"  {tag:8s} FAILED: {msg}")
        for pair, d in out["pairs"].items():
            print(f"  {pair:15s} J rel {d['objective_rel']:.2e}  zs {d['zs_inf']:.2e} "
                  f"(rel {d['zs_rel']:.2e})  zf {d['zf_inf']:.2e}  u {d['u_inf']:.2e}  "
                  f"argmax {d['argmax']}")
        for key, r in out["wall_time_ratios"].items():
            print(f"  wall time {key}: {r:.2f}")


if __name__ == "__main__":
    main()
