"""Acceptance criteria 1-11 at their stated tolerances.

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints
one PASS/FAIL line per criterion.
"""

import numpy as np
import pytest

from simocp.integrate import IntegratorConfig, run_dp54, run_radau2a
from simocp.manifold import (ManifoldSpec, curvature_bvp_solve, curvature_local_solve,
                             ift_sensitivities, zdp_solve)
from simocp.model import registry_get
from simocp.nlp import NlpProblem, solve
from simocp.ocp import OcpProblem, compare_solutions, solve_ocp

crit = pytest.mark.criterion


def mm_sys(eps=1e-2):
    return registry_get("mmh-ocp", eps).system


@crit(1)
def test_qssa_exactness(record_property):
    zs = np.linspace(0.0, 2.0, 50)
    zf = np.array([zdp_solve(mm_sys(), [z], [0.0]).z_f[0] for z in zs])
    err = float(np.max(np.abs(zf - zs / (1 + zs))))
    record_property("detail", f"max error {err:.1e}")
    assert err <= 1e-10


def _riccati_slope(method, hs):
    errs = []
    for h in hs:
        cfg = IntegratorConfig(method=method, fixed_step=h, newton_tol=1e-14)
        f = lambda t, y: -y * y  # noqa: E731
        if method == "dp54":
            res = run_dp54(f, np.ones((1, 1)), 0.0, 1.0, cfg)
        else:
            res = run_radau2a(f, lambda t, y: (-2.0 * y)[None], np.ones((1, 1)), 0.0, 1.0, cfg)
        errs.append(abs(res.states[-1, 0, 0] - 0.5))
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


@crit(2)
def test_integrator_orders(record_property):
    radau = _riccati_slope("radau2a", [0.1, 0.05, 0.025, 0.0125])
    dp54 = _riccati_slope("dp54", [1 / 48, 1 / 64, 1 / 96, 1 / 128])
    record_property("detail", f"radau2a {radau:.2f}, dp54 {dp54:.2f}")
    assert abs(radau - 3.0) <= 0.2
    assert abs(dp54 - 5.0) <= 0.3


@crit(3)
def test_radau_amplification(record_property):
    cfg = IntegratorConfig(method="radau2a", fixed_step=1.0, newton_tol=1e-15)
    res = run_radau2a(lambda t, y: -y, lambda t, y: -np.ones((1, 1, y.shape[1])),
                      np.ones((1, 1)), 0.0, 1.0, cfg)
    amp = res.states[-1, 0, 0]
    record_property("detail", f"|R - 4/11| = {abs(amp - 4 / 11):.1e}")
    assert abs(amp - 4.0 / 11.0) <= 1e-12


@crit(4)
@pytest.mark.parametrize("spec", [ManifoldSpec(m=0), ManifoldSpec(m=1),
                                  ManifoldSpec(method="curvature-local")],
                         ids=["zdp0", "zdp1", "curvature-local"])
def test_sensitivities_against_resolves(record_property, spec):
    sys = mm_sys()
    worst = 0.0
    for zs, u in ((1.0, 0.0), (0.4, 3.0), (1.7, 8.0)):
        p = zdp_solve(sys, [zs], [u], spec) if spec.method == "zdp" else \
            curvature_local_solve(sys, [zs], [u], spec)
        h_zs, h_u = ift_sensitivities(sys, p, spec)
        for k, (dz, du) in enumerate(((1e-5, 0.0), (0.0, 1e-5))):
            again = []
            for sgn in (1, -1):
                z2, u2 = [zs + sgn * dz], [u + sgn * du]
                q = zdp_solve(sys, z2, u2, spec, p.z_f) if spec.method == "zdp" else \
                    curvature_local_solve(sys, z2, u2, spec, p.z_f)
                again.append(q.z_f[0])
            fd = (again[0] - again[1]) / (2e-5)
            ift = (h_zs if k == 0 else h_u)[0, 0]
            scale = max(abs(fd), 1e-3 * abs(h_zs[0, 0]))  # dz_f/du vanishes for QSSA
            worst = max(worst, abs(ift - fd) / scale)
    record_property("detail", f"{spec.tag} worst rel {worst:.1e}")
    assert worst <= 1e-5


@crit(4)
def test_qssa_slope_at_one():
    p = zdp_solve(mm_sys(), [1.0], [0.0])
    h_zs, _ = ift_sensitivities(mm_sys(), p, ManifoldSpec())
    assert abs(h_zs[0, 0] - 0.25) <= 1e-8


def _nlp_test_set():
    q = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])

    def rosen(x):
        return 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2

    def rosen_g(x):
        return np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]),
                         200 * (x[1] - x[0] ** 2)])

    return {
        "quadratic": NlpProblem(2, lambda x: 0.5 * x @ q @ x - b @ x, np.zeros(2),
                                gradient=lambda x: q @ x - b),
        "equality": NlpProblem(2, lambda x: x @ x, np.array([3.0, -1.0]),
                               gradient=lambda x: 2 * x,
                               constraints=lambda x: np.array([x[0] + x[1] - 1.0]),
                               jacobian=lambda x: np.array([[1.0, 1.0]])),
        "rosenbrock": NlpProblem(2, rosen, np.array([-1.2, 1.0]), gradient=rosen_g),
        "active-bound": NlpProblem(1, lambda x: (x[0] + 2) ** 2, np.array([3.0]),
                                   gradient=lambda x: 2 * (x + 2), lb=[-1.0], ub=[5.0]),
    }


@crit(5)
def test_nlp_core(record_property):
    from simocp.nlp import NlpOptions

    opts = NlpOptions(tol=1e-9, max_iters=500)
    worst = 0.0
    for name, prob in _nlp_test_set().items():
        a = solve(prob, opts)
        b = solve(_nlp_test_set()[name], opts)
        assert a.converged, name
        worst = max(worst, a.kkt_residual)
        assert len(a.iterates) == len(b.iterates)
        assert all(np.array_equal(x, y) for x, y in zip(a.iterates, b.iterates)), name
    record_property("detail", f"worst KKT {worst:.1e}")
    assert worst <= 1e-8


@crit(6)
def test_full_lifted_relative_gaps(record_property, benchmark_solutions):
    d = compare_solutions(benchmark_solutions["full"], benchmark_solutions["lifted"])
    record_property("detail", f"objective {d['objective_rel']:.2e}, z_s {d['zs_rel']:.2e}")
    assert d["objective_rel"] <= 0.01
    assert d["zs_rel"] <= 0.01


@crit(6)
def test_full_lifted_argmax_is_slow_state(record_property, benchmark_solutions):
    d = compare_solutions(benchmark_solutions["full"], benchmark_solutions["lifted"])
    record_property("detail", f"argmax {d['argmax']} (zs {d['zs_inf']:.2e}, zf {d['zf_inf']:.2e}, "
                              f"u {d['u_inf']:.2e})")
    assert d["argmax"] == "zs_inf"


@crit(7)
def test_lifted_speedup(record_property, benchmark_solutions):
    full, lifted = benchmark_solutions["full"], benchmark_solutions["lifted"]
    ratio = full.wall_time_seconds["total"] / lifted.wall_time_seconds["total"]
    record_property("detail", f"full/lifted {ratio:.2f}, lifted implicit steps "
                              f"{lifted.stats.implicit_steps}")
    assert ratio >= 1.5
    assert lifted.stats.implicit_steps == 0
    assert full.stats.implicit_steps > 0


@crit(8)
def test_manifold_method_consistency(record_property):
    grid = (0.5, 1.0, 2.0)
    dists = []
    for eps in (1e-2, 1e-3, 1e-4):
        sys = mm_sys(eps)
        pts = {"zdp0": [], "local": [], "bvp": []}
        for z in grid:
            pts["zdp0"].append(zdp_solve(sys, [z], [0.0]).z_f[0])
            pts["local"].append(curvature_local_solve(sys, [z], [0.0]).z_f[0])
            pts["bvp"].append(curvature_bvp_solve(sys, [z], [0.0]).z_f[0])
        pair = {f"{a}/{b}": float(np.max(np.abs(np.subtract(pts[a], pts[b]))))
                for a, b in (("zdp0", "local"), ("zdp0", "bvp"), ("local", "bvp"))}
        assert all(v <= 20 * eps for v in pair.values()), (eps, pair)
        dists.append(pair)
    record_property("detail", "zdp0/local " + ", ".join(f"{p['zdp0/local']:.1e}" for p in dists))
    for key in dists[0]:
        assert dists[0][key] > dists[1][key] > dists[2][key], key


@crit(9)
@pytest.mark.parametrize("m", [0, 1, 2])
def test_davis_skodje_error_decay(record_property, m):
    def err(eps):
        sys = registry_get("davis-skodje", eps).system
        grid = (0.5, 1.5, 3.0)
        return max(abs(zdp_solve(sys, [z], None, ManifoldSpec(m=m)).z_f[0] - z / (1 + z))
                   for z in grid)

    factor = err(0.1) / err(0.01)
    record_property("detail", f"m={m} factor {factor:.0f}")
    assert factor > 5


@crit(10)
def test_feasibility_guarantees(record_property, benchmark_solutions):
    for key in ("full", "lifted"):
        u = benchmark_solutions[key].samples.u
        assert np.all(u >= 0.0) and np.all(u <= 10.0), key
        us = benchmark_solutions[key].x[2::3][:20]  # node controls, stride nx + nu
        assert np.all(us >= 0.0) and np.all(us <= 10.0), key
    r = float(np.max(np.abs(benchmark_solutions["lifted"].node_residual)))
    record_property("detail", f"lifted node |r| {r:.1e}")
    assert r <= 1e-8


@crit(11)
@pytest.mark.parametrize("form", ["full", "lifted"])
def test_refinement_stability(record_property, benchmark_solutions, form):
    coarse = benchmark_solutions[form]
    fine = solve_ocp(OcpProblem.from_benchmark(benchmark_solutions["entry"], form, N=40))
    change = abs(fine.objective - coarse.objective) / abs(coarse.objective)
    record_property("detail", f"{form} {change:.1e}")
    assert change <= 0.005
