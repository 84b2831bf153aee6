"""Where the largest full/lifted trajectory difference comes from.

The full solve starts on f_f = 0 and relaxes onto the true slow manifold,
which sits O(eps) above the QSSA graph when u > 0. The lifted solve stays on
its manifold approximation, so the fast difference tracks that offset. This
script prints the three sup-norm gaps for ZDP orders 0 and 1
together with the offset of the full trajectory from the QSSA graph.

Usage: python3 scripts/argmax_analysis.py [--eps 1e-2]
"""

import argparse

import numpy as np

from simocp.manifold import ManifoldSpec
from simocp.model import registry_get
from simocp.ocp import OcpProblem, compare_solutions, solve_ocp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eps", type=float, default=1e-2)
    args = ap.parse_args()

    entry = registry_get("mmh-ocp", args.eps)
    full = solve_ocp(OcpProblem.from_benchmark(entry, "full"))
    s = full.samples
    offset = s.z_f[:, 0] - s.z_s[:, 0] / (1 + s.z_s[:, 0])
    print(f"full: |z_s|_inf = {np.max(np.abs(s.z_s)):.4f}, "
          f"max z_f - QSSA = {np.max(np.abs(offset)):.3e} (= {np.max(np.abs(offset)) / args.eps:.2f} eps)")
    for spec in (ManifoldSpec(m=0), ManifoldSpec(m=1)):
        lifted = solve_ocp(OcpProblem.from_benchmark(entry, "lifted", manifold=spec))
        d = compare_solutions(full, lifted)
        print(f"lifted {spec.tag:16s} zs {d['zs_inf']:.2e}  zf {d['zf_inf']:.2e}  "
              f"u {d['u_inf']:.2e}  argmax {d['argmax']}  J rel {d['objective_rel']:.2e}")


if __name__ == "__main__":
    main()
