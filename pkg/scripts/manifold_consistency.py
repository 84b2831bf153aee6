"""Distances between manifold approximations on the enzyme benchmark as eps shrinks.

Usage: python3 scripts/manifold_consistency.py
"""

import numpy as np

from simocp.manifold import (ManifoldSpec, curvature_bvp_solve, curvature_local_solve,
                             zdp_solve)
from simocp.model import registry_get

GRID = (0.5, 1.0, 2.0)


def main():
    print(f"{'eps':>8s} {'zdp0/local':>12s} {'zdp0/bvp':>12s} {'local/bvp':>12s} "
          f"{'zdp1/local':>12s}")
    for eps in (1e-2, 1e-3, 1e-4):
        sys = registry_get("mmh-ocp", eps).system
        pts = {k: [] for k in ("zdp0", "zdp1", "local", "bvp")}
        for z in GRID:
            pts["zdp0"].append(zdp_solve(sys, [z], [0.0]).z_f[0])
            pts["zdp1"].append(zdp_solve(sys, [z], [0.0], ManifoldSpec(m=1)).z_f[0])
            pts["local"].append(curvature_local_solve(sys, [z], [0.0]).z_f[0])
            pts["bvp"].append(curvature_bvp_solve(sys, [z], [0.0]).z_f[0])

        def dist(a, b):
            return np.max(np.abs(np.subtract(pts[a], pts[b])))

        print(f"{eps:8.0e} {dist('zdp0', 'local'):12.3e} {dist('zdp0', 'bvp'):12.3e} "
              f"{dist('local', 'bvp'):12.3e} {dist('zdp1', 'local'):12.3e}")


if __name__ == "__main__":
    main()
