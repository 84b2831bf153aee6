import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from simocp.errors import ContractError, NlpFailure
from simocp.integrate import IntegratorConfig, integrate
from simocp.manifold import ManifoldSpec
from simocp.model import PartitionedState, linear_system, registry_get
from simocp.nlp import NlpOptions
from simocp.ocp import (Layout, OcpProblem, compare_formulations, compare_solutions,
                        initial_guess, reconstruct, solve_ocp, trajectory_cost, transcribe)

# single-shooting SLSQP over a Radau(rtol 1e-10) solve of the full benchmark, eps=1e-2, N=20
J_FULL_ORACLE = -188.91582241589762


@pytest.fixture(scope="module")
def entry():
    return registry_get("mmh-ocp", 1e-2)


def test_variable_counts(entry):
    full = OcpProblem.from_benchmark(entry, "full")
    lifted = OcpProblem.from_benchmark(entry, "lifted")
    reduced = OcpProblem.from_benchmark(entry, "reduced")
    assert full.n_vars == lifted.n_vars == 21 * 2 + 20
    assert reduced.n_vars == 21 + 20
    assert len(transcribe(lifted).x0) == lifted.n_vars


@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2))
def test_layout_round_trip(N, nx, nu):
    lay = Layout(N, nx, nu)
    w = np.arange(lay.size, dtype=float)
    xs, us = lay.split(w)
    assert xs.shape == (nx, N + 1) and us.shape == (nu, N)
    np.testing.assert_array_equal(lay.join(xs, us), w)
    for k in range(N):
        np.testing.assert_array_equal(w[lay.x_index(k)], xs[:, k])
        np.testing.assert_array_equal(w[lay.u_index(k)], us[:, k])


def test_problem_contracts(entry):
    with pytest.raises(ContractError):
        OcpProblem.from_benchmark(entry, "bogus")
    with pytest.raises(ContractError):
        OcpProblem.from_benchmark(entry, "full", manifold=ManifoldSpec())
    with pytest.raises(ContractError):
        OcpProblem.from_benchmark(entry, "lifted", manifold=ManifoldSpec(method="curvature-bvp"))
    with pytest.raises(ContractError):
        OcpProblem.from_benchmark(entry, "full", zf0_policy="given")
    with pytest.raises(ContractError):
        OcpProblem.from_benchmark(entry, "full", N=0)
    with pytest.raises(ContractError):
        OcpProblem.from_benchmark(registry_get("davis-skodje"), "full")
    assert OcpProblem.from_benchmark(entry, "full").integrator.method == "radau2a"
    assert OcpProblem.from_benchmark(entry, "lifted").integrator.method == "dp54"


@pytest.mark.parametrize("form", ["full", "lifted"])
def test_derivatives_match_differences(entry, form):
    # outside the batch the step sequence changes with w, so tighten the integrator
    tight = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)
    p = OcpProblem(entry.system, entry.ocp.running_cost, 1.0, [1.0], form, N=2, integrator=tight)
    sh = transcribe(p).shooting
    w = initial_guess(p) + 0.01
    _, _, grad, jac = sh.derivatives(w)
    for i in range(len(w)):
        h = 1e-3 * max(1.0, abs(w[i]))
        e = np.zeros_like(w)
        e[i] = h
        (fp, cp), (fm, cm) = sh.values(w + e), sh.values(w - e)
        assert grad[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-6)
        np.testing.assert_allclose(jac[:, i], (cp - cm) / (2 * h), rtol=1e-5, atol=1e-6)


def test_regression_against_independent_solve(benchmark_solutions):
    full = benchmark_solutions["full"]
    assert full.converged
    assert full.objective == pytest.approx(J_FULL_ORACLE, rel=1e-7)
    assert full.x[2] == pytest.approx(3.9617, abs=1e-3)  # u_0


def test_solutions_respect_bounds_and_manifold(benchmark_solutions):
    for key in ("full", "lifted"):
        sol = benchmark_solutions[key]
        assert np.all(sol.samples.u >= 0.0) and np.all(sol.samples.u <= 10.0)
        assert len(sol.samples) == 201
    lifted = benchmark_solutions["lifted"]
    assert np.max(np.abs(lifted.node_residual)) <= 1e-8
    assert lifted.stats.implicit_steps == 0


def test_reconstruction_is_continuous(benchmark_solutions):
    for key in ("full", "lifted"):
        sol = benchmark_solutions[key]
        p = OcpProblem.from_benchmark(benchmark_solutions["entry"], key)
        _, ends, _, _ = reconstruct(p, sol.x)
        xs, _ = Layout(p.N, p.nx, 1).split(sol.x)
        n = 2 if key == "full" else 1
        assert np.max(np.abs(ends[:n] - xs[:n, 1:])) <= 1e-7


def test_objective_matches_independent_quadrature(benchmark_solutions):
    # re-integrate the converged full solution with scipy, cost as an extra state
    from scipy.integrate import solve_ivp

    sol = benchmark_solutions["full"]
    p = OcpProblem.from_benchmark(benchmark_solutions["entry"], "full")
    xs, us = Layout(p.N, p.nx, 1).split(sol.x)
    eps = p.sys.epsilon

    def rhs(t, y, u):
        zs, zf = y[0], y[1]
        return [-zs + (zs + 0.5) * zf + u, (zs - (zs + 1) * zf) / eps, -50 * zf + u * u]

    total = 0.0
    for k in range(p.N):
        out = solve_ivp(rhs, (0.0, p.interval), [*xs[:, k], 0.0], method="Radau",
                        rtol=1e-11, atol=1e-13, args=(us[0, k],))
        total += out.y[2, -1]
    assert sol.objective == pytest.approx(total, rel=1e-6)


def test_trapezoid_objective_is_trajectory_quadrature(entry):
    p = OcpProblem.from_benchmark(entry, "lifted", quadrature="trapezoid")
    sol = solve_ocp(p)
    traj, ends, _, _ = reconstruct(p, sol.x)
    assert sol.objective == pytest.approx(trajectory_cost(p, traj, ends), rel=1e-12)


def test_self_comparison_is_zero(benchmark_solutions):
    d = compare_solutions(benchmark_solutions["lifted"], benchmark_solutions["lifted"])
    assert d["zs_inf"] == d["zf_inf"] == d["u_inf"] == d["objective_rel"] == 0.0


def test_compare_full_with_itself(entry):
    p = OcpProblem.from_benchmark(entry, "full", N=4)
    out = compare_formulations(p, ["full", "full"])
    assert out["order"] == ["full", "full#1"]
    d = out["pairs"]["full/full#1"]
    assert d["zs_inf"] == d["zf_inf"] == d["u_inf"] == d["objective_rel"] == 0.0


def test_zero_control_is_optimal_for_control_cost(entry):
    p = OcpProblem(entry.system, lambda zs, zf, u: u[0] ** 2, 2.0, [1.0], "lifted", N=4)
    sol = solve_ocp(p, init="midpoint")
    assert np.max(np.abs(sol.samples.u)) <= 1e-6
    assert abs(sol.objective) <= 1e-10


def test_uncontrolled_full_problem_matches_simulation():
    sys = linear_system([[-1.0, 0.5], [1.0, -1.0]], n_s=1, epsilon=0.01)
    p = OcpProblem(sys, lambda zs, zf, u: zs[0] ** 2, 1.0, [1.0], "full", N=1)
    sol = solve_ocp(p)
    zf0 = np.array([1.0])  # f_f = z_s - z_f = 0
    sim = integrate(sys, PartitionedState([1.0], zf0), None, (0.0, 1.0),
                    IntegratorConfig(method="radau2a", rel_tol=1e-10, abs_tol=1e-12))
    assert sol.x[:2] == pytest.approx([1.0, 1.0], abs=1e-9)
    assert sol.x[2:] == pytest.approx([sim.z_s[-1, 0], sim.z_f[-1, 0]], abs=1e-6)


def test_initialisation_does_not_change_the_optimum(entry, benchmark_solutions):
    p = OcpProblem.from_benchmark(entry, "lifted")
    cold = solve_ocp(p, init="zero")
    warm = solve_ocp(p, init=solve_ocp(p.with_formulation("reduced")))
    ref = benchmark_solutions["lifted"].objective
    assert cold.objective == pytest.approx(ref, rel=1e-6)
    assert warm.objective == pytest.approx(ref, rel=1e-6)


def test_reduced_matches_lifted(entry, benchmark_solutions):
    red = solve_ocp(OcpProblem.from_benchmark(entry, "reduced"))
    assert red.objective == pytest.approx(benchmark_solutions["lifted"].objective, rel=1e-6)


def test_trapezoid_quadrature_runs(entry, benchmark_solutions):
    p = OcpProblem.from_benchmark(entry, "lifted", quadrature="trapezoid")
    sol = solve_ocp(p)
    assert sol.converged
    assert sol.objective == pytest.approx(benchmark_solutions["lifted"].objective, rel=1e-3)


def test_gap_shrinks_with_eps():
    gaps = []
    for eps in (1e-2, 1e-3):
        e = registry_get("mmh-ocp", eps)
        out = compare_formulations(OcpProblem.from_benchmark(e, "full"), ["full", "lifted"])
        gaps.append(out["pairs"]["full/lifted"]["objective_rel"])
    assert gaps[1] < gaps[0] / 5


def test_failures_are_reported_not_raised(entry):
    p = OcpProblem.from_benchmark(entry, "full", N=2,
                                  nlp=NlpOptions(tol=1e-14, constraint_tol=1e-14, max_iters=1))
    with pytest.raises(NlpFailure) as info:
        solve_ocp(p, init="zero")
    assert info.value.phase == "full"
    partial = solve_ocp(p, init="zero", raise_on_failure=False)
    assert not partial.converged and len(partial.samples) == 201
    out = compare_formulations(p, ["full", "lifted"], init="zero")
    assert set(out["failures"]) == {"full", "lifted"}
    assert out["pairs"] == {}


def test_initial_vector_length_checked(entry):
    with pytest.raises(ContractError):
        initial_guess(OcpProblem.from_benchmark(entry, "lifted"), np.zeros(3))
