import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from simocp.errors import ContractError, StepSizeError
from simocp.integrate import (IntegratorConfig, PiecewiseConstant, integrate,
                              integrate_on_manifold, run_dp54, run_radau2a)
from simocp.model import PartitionedState, registry_get


def riccati(t, y):
    return -y * y


def riccati_jac(t, y):
    return (-2.0 * y)[None, :, :]


def final_error(method, h):
    cfg = IntegratorConfig(method=method, fixed_step=h, newton_tol=1e-14)
    y0 = np.ones((1, 1))
    if method == "dp54":
        res = run_dp54(riccati, y0, 0.0, 1.0, cfg)
    else:
        res = run_radau2a(riccati, riccati_jac, y0, 0.0, 1.0, cfg)
    return abs(res.states[-1, 0, 0] - 0.5)


def slope(method, hs):
    errs = [final_error(method, h) for h in hs]
    return np.polyfit(np.log(hs), np.log(errs), 1)[0]


def test_radau_order_three():
    assert slope("radau2a", [0.1, 0.05, 0.025, 0.0125]) == pytest.approx(3.0, abs=0.2)


def test_dp54_order_five():
    # the fifth-order error constant is tiny, so the asymptotic range starts near h = 1/48
    assert slope("dp54", [1 / 48, 1 / 64, 1 / 96, 1 / 128]) == pytest.approx(5.0, abs=0.3)


def test_radau_stability_value():
    cfg = IntegratorConfig(method="radau2a", fixed_step=1.0, newton_tol=1e-15)
    res = run_radau2a(lambda t, y: -y, lambda t, y: -np.ones((1, 1, y.shape[1])),
                      np.ones((1, 1)), 0.0, 1.0, cfg)
    assert res.states[-1, 0, 0] == pytest.approx(4.0 / 11.0, abs=1e-12)


@given(st.floats(-1e8, -1e-3))
def test_radau_is_l_stable_on_the_negative_axis(z):
    cfg = IntegratorConfig(method="radau2a", fixed_step=1.0, newton_tol=1e-15)
    res = run_radau2a(lambda t, y: z * y, lambda t, y: np.full((1, 1, y.shape[1]), z),
                      np.ones((1, 1)), 0.0, 1.0, cfg)
    exact = (1 + z / 3) / (1 - 2 * z / 3 + z * z / 6)
    amp = res.states[-1, 0, 0]
    assert abs(amp) < 1.0
    assert amp == pytest.approx(exact, rel=1e-9, abs=1e-15)


@given(st.floats(-5.0, 2.0), st.floats(0.1, 3.0))
def test_dp54_adaptive_tracks_exponential(lam, y0):
    cfg = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)
    res = run_dp54(lambda t, y: lam * y, np.array([[y0]]), 0.0, 1.0, cfg)
    assert res.states[-1, 0, 0] == pytest.approx(y0 * np.exp(lam), rel=1e-8)


def test_batch_columns_are_independent_solutions():
    cfg = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)
    y0 = np.array([[1.0, 2.0, 0.5]])
    res = run_dp54(riccati, y0, 0.0, 1.0, cfg)
    np.testing.assert_allclose(res.states[-1, 0], y0[0] / (1 + y0[0]), rtol=1e-8)


def test_t_eval_points_are_hit_exactly():
    cfg = IntegratorConfig(method="radau2a")
    times = np.linspace(0.0, 1.0, 11)
    res = run_radau2a(riccati, riccati_jac, np.ones((1, 1)), 0.0, 1.0, cfg, times)
    assert set(times) <= set(res.times)
    assert np.all(np.diff(res.times) > 0)


def test_stiff_benchmark_needs_far_fewer_implicit_steps():
    sys = registry_get("mmh-ocp", 1e-3).system
    z0 = PartitionedState([1.0], [0.0])
    loose = dict(rel_tol=1e-3, abs_tol=1e-6)
    explicit = integrate(sys, z0, [1.0], (0.0, 5.0), IntegratorConfig(method="dp54", **loose))
    implicit = integrate(sys, z0, [1.0], (0.0, 5.0), IntegratorConfig(method="radau2a", **loose))
    assert explicit.stats.steps > 10 * implicit.stats.steps
    assert implicit.stats.implicit_steps == implicit.stats.steps
    assert explicit.stats.implicit_steps == 0
    np.testing.assert_allclose(explicit.z_s[-1], implicit.z_s[-1], rtol=1e-2)


def test_methods_agree_on_benchmark(mm):
    z0 = PartitionedState([1.0], [0.5])
    ts = np.linspace(0.0, 5.0, 6)
    a = integrate(mm, z0, [2.0], (0.0, 5.0), IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12), t_eval=ts)
    b = integrate(mm, z0, [2.0], (0.0, 5.0),
                  IntegratorConfig(method="radau2a", rel_tol=1e-10, abs_tol=1e-12), t_eval=ts)
    np.testing.assert_allclose(a.z_s, b.z_s, atol=1e-7)
    np.testing.assert_allclose(a.z_f, b.z_f, atol=1e-7)


def test_piecewise_control_restarts_at_switches(mm):
    ctrl = PiecewiseConstant([0.0, 1.0, 2.0], [[0.0], [5.0]])
    tr = integrate(mm, PartitionedState([1.0], [0.5]), ctrl, (0.0, 2.0))
    assert 1.0 in tr.times
    before, after = tr.u[tr.times < 1.0], tr.u[tr.times >= 1.0]
    assert np.all(before == 0.0) and np.all(after == 5.0)


def test_zero_length_span(mm):
    tr = integrate(mm, PartitionedState([1.0], [0.5]), [0.0], (2.0, 2.0))
    assert len(tr) == 1
    np.testing.assert_array_equal(tr.z_s, [[1.0]])


def test_control_bounds_enforced(mm):
    with pytest.raises(ContractError):
        integrate(mm, PartitionedState([1.0], [0.5]), [11.0], (0.0, 1.0))


def test_step_budget_exhausted():
    cfg = IntegratorConfig(max_steps=5, rel_tol=1e-12, abs_tol=1e-14)
    with pytest.raises(StepSizeError):
        run_dp54(lambda t, y: np.cos(50.0 * t) * np.ones_like(y), np.zeros((1, 1)), 0.0, 10.0, cfg)


def test_step_size_floor():
    cfg = IntegratorConfig(h_min=1e-2, h_init=1e-2, rel_tol=1e-12, abs_tol=1e-14)
    with pytest.raises(StepSizeError):
        run_dp54(lambda t, y: np.cos(1e3 * t) * np.ones_like(y), np.zeros((1, 1)), 0.0, 1.0, cfg)


def test_manifold_embedded_on_davis_skodje():
    entry = registry_get("davis-skodje", 0.1)
    ts = np.linspace(0.0, 2.0, 5)
    tr = integrate_on_manifold(entry.system, [1.0], None, (0.0, 2.0),
                               cfg=IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12), t_eval=ts)
    np.testing.assert_allclose(tr.z_s[:, 0], np.exp(-ts), rtol=1e-8)
    y = tr.z_s[:, 0]
    qssa = ((1 - 0.1) * y + y * y) / (1 + y) ** 2
    np.testing.assert_allclose(tr.z_f[:, 0], qssa, atol=1e-10)
    assert tr.stats.implicit_steps == 0
