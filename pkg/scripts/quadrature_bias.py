"""Compare the cost-state quadrature with the step-endpoint trapezoid rule.

The trapezoid on adaptive DP54 steps carries an eps-independent error that
shifts the optimal first control; the cost state does not.

Usage: python3 scripts/quadrature_bias.py
"""

from simocp.model import registry_get
from simocp.ocp import OcpProblem, solve_ocp


def main():
    for eps in (1e-2, 1e-3):
        entry = registry_get("mmh-ocp", eps)
        full = solve_ocp(OcpProblem.from_benchmark(entry, "full"))
        print(f"eps = {eps:g}: full J = {full.objective:.10f}, u_0 = {full.x[2]:.6f}")
        for quad in ("state", "trapezoid"):
            sol = solve_ocp(OcpProblem.from_benchmark(entry, "lifted", quadrature=quad))
            gap = abs(sol.objective - full.objective) / abs(full.objective)
            print(f"  lifted/{quad:9s} J = {sol.objective:.10f}  rel gap {gap:.2e}  "
                  f"u_0 = {sol.x[2]:.6f}  (shift {sol.x[2] - full.x[2]:+.2e})")


if __name__ == "__main__":
    main()
