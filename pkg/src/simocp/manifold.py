"""Slow manifold point computation and implicit-function sensitivities.

Three approximations of the fast variables ``z_f = h(z_s, u)`` are offered:

``zdp``
    Zero Derivative Principle: solve ``eps**m g_m(z_s, z_f, u) = 0`` for
    ``z_f`` by damped Newton (``m=0`` is the QSSA).
``curvature-local``
    Minimise ``||zddot||^2`` over ``z_f`` at fixed ``z_s`` by Gauss-Newton.
``curvature-bvp``
    Minimise ``||zddot(t0)||^2`` over trajectories whose slow part ends at
    ``z_s`` after ``bvp_horizon``; the endpoint is returned.

Curvature is measured in fast time (``eps**2 zddot``). That is a constant
positive multiple of ``||zddot||^2`` so the minimiser is unchanged, while
gradients stay ``O(1)`` for small ``eps``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .calculus import (EPS_MACH, DEFAULT as DEFAULT_DERIV, DerivativeConfig,
                       _batch_control, _jacobian_batch, fd_jacobian,
                       scaled_fast_derivative_batch, zddot_batch)
from .errors import (ContractError, EvaluationError, FoldError, IntegrationError,
                     ManifoldError, NlpFailure, NonConvergenceError)
from .model import SpSystem, as_control

MANIFOLD_METHODS = ("zdp", "curvature-local", "curvature-bvp")


@dataclass(frozen=True)
class ManifoldSpec:
    """Which slow manifold approximation to use and how hard to solve it.

    ``bvp_lower``/``bvp_upper`` optionally box the initial state of the
    curvature BVP (e.g. non-negative concentrations).
    """

    method: str = "zdp"
    m: int = 0
    bvp_horizon: float = 1.0
    tol: float = 1e-10
    max_iters: int = 50
    m_max: int = 3
    bvp_lower: Optional[tuple] = None
    bvp_upper: Optional[tuple] = None

    def __post_init__(self):
        if self.method not in MANIFOLD_METHODS:
            raise ContractError(f"unknown manifold method {self.method!r}; "
                                f"choose from {MANIFOLD_METHODS}")
        if self.m < 0 or self.m > self.m_max:
            raise ContractError(f"ZDP order m={self.m} outside [0, {self.m_max}]")
        if not (self.tol > 0 and self.bvp_horizon > 0 and self.max_iters >= 1):
            raise ContractError("tol, bvp_horizon and max_iters must be positive")

    @property
    def tag(self) -> str:
        if self.method == "zdp":
            return f"zdp(m={self.m})"
        if self.method == "curvature-bvp":
            return f"curvature-bvp(T={self.bvp_horizon:g})"
        return self.method


@dataclass(frozen=True)
class ManifoldPoint:
    z_s: np.ndarray
    z_f: np.ndarray
    u: np.ndarray
    residual_norm: float
    method_tag: str


# ---------------------------------------------------------------------------
# residuals (batched: arrays (n, B))


def _dcfg_for(spec: ManifoldSpec, dcfg: DerivativeConfig) -> DerivativeConfig:
    if dcfg.m_max < spec.m:
        return dataclasses.replace(dcfg, m_max=spec.m)
    return dcfg


def residual_levels(sys: SpSystem, spec: ManifoldSpec, dcfg: DerivativeConfig) -> int:
    """Number of nested finite differences inside the residual evaluation."""
    analytic = dcfg.uses_analytic(sys)
    if spec.method == "zdp":
        return max(0, spec.m - 1) if analytic else spec.m
    return 1 if analytic else 2


def curvature_residual(sys, zs, zf, u, dcfg=DEFAULT_DERIV):
    """Fast-time curvature vector ``eps**2 zddot`` (shape ``(n, B)``)."""
    return zddot_batch(sys, np.concatenate([zs, zf]), u, dcfg, scaled=True)


def _curvature_jac(sys, zs, zf, u, dcfg, rel):
    ns = sys.n_s

    def rho(x):
        b = x.shape[1]
        reps = b // zs.shape[1]
        return curvature_residual(sys, np.tile(zs, (1, reps)), x, np.tile(u, (1, reps)), dcfg)

    return fd_jacobian(rho, zf, rel)  # (n, n_f, B)


def manifold_residual(sys: SpSystem, zs, zf, u, spec: ManifoldSpec,
                      dcfg: DerivativeConfig = DEFAULT_DERIV, rel: Optional[float] = None):
    """Algebraic residual ``r(z_s, z_f, u)`` whose root defines the manifold point.

    ZDP: ``eps**m g_m``. Curvature-local: gradient of the fast-time curvature
    ``||eps**2 zddot||^2`` with respect to ``z_f``.
    """
    zs = np.asarray(zs, dtype=float)
    zf = np.asarray(zf, dtype=float)
    one = zs.ndim == 1
    if one:
        zs, zf = zs[:, None], zf[:, None]
    u = _batch_control(u, zs.shape[1])
    dcfg = _dcfg_for(spec, dcfg)
    if spec.method == "zdp":
        if spec.m == 0:
            out = sys.fast(zs, zf, u)
        else:
            out = scaled_fast_derivative_batch(sys, np.concatenate([zs, zf]), u, spec.m, dcfg)
    elif spec.method == "curvature-local":
        rel = dcfg.fd_step if rel is None else rel
        rho = curvature_residual(sys, zs, zf, u, dcfg)
        jac = _curvature_jac(sys, zs, zf, u, dcfg, rel)
        out = 2.0 * np.einsum("ijb,ib->jb", jac, rho)
    else:
        raise ContractError("curvature-bvp has no algebraic residual")
    if not np.all(np.isfinite(out)):
        raise EvaluationError("non-finite manifold residual")
    return out[:, 0] if one else out


def _residual_dzf(sys, zs, zf, u, spec, dcfg):
    """``dr/dz_f`` with shape ``(n_f, n_f, B)``."""
    if spec.method == "zdp" and spec.m == 0 and dcfg.uses_analytic(sys):
        return _jacobian_batch(sys, zs, zf, u, dcfg).d_ff_dzf
    if spec.method == "curvature-local":
        # Gauss-Newton matrix 2 J^T J
        jac = _curvature_jac(sys, zs, zf, u, dcfg, dcfg.fd_step)
        return 2.0 * np.einsum("ijb,ikb->jkb", jac, jac)
    rel = _nested_rel(residual_levels(sys, spec, dcfg) + 1, dcfg)

    def r(x):
        reps = x.shape[1] // zs.shape[1]
        return manifold_residual(sys, np.tile(zs, (1, reps)), x, np.tile(u, (1, reps)), spec, dcfg)

    return fd_jacobian(r, zf, rel)


def _nested_rel(levels: int, dcfg: DerivativeConfig) -> float:
    return dcfg.fd_step if levels <= 1 else EPS_MACH ** (1.0 / (levels + 2))


# ---------------------------------------------------------------------------
# batched solvers


def _col_norm(r):
    return np.max(np.abs(r), axis=0) if r.shape[0] else np.zeros(r.shape[1])


def _newton_step(sys, zs, zf, u, r, spec, dcfg):
    jac = _residual_dzf(sys, zs, zf, u, spec, dcfg)
    jt = np.moveaxis(jac, -1, 0)
    cond = np.linalg.cond(jt)
    good = np.isfinite(cond) & (cond <= 1e13)
    if not good.all():
        bad = int(np.flatnonzero(~good)[0])
        raise FoldError(f"singular dr/dz_f at z_s={zs[:, bad]}", z_s=zs[:, bad].copy())
    return -np.linalg.solve(jt, np.moveaxis(r, -1, 0)[..., None])[..., 0].T


def _zdp_newton(sys, zs, zf, u, spec, dcfg, polish=True):
    """Damped Newton on ``r(z_f) = 0`` for every column. Returns (zf, norms, history).

    After convergence one undamped polishing step is taken and kept where it
    does not increase the residual.
    """
    history = []
    r = manifold_residual(sys, zs, zf, u, spec, dcfg)
    norm = _col_norm(r)
    for it in range(spec.max_iters + 1):
        history.append(float(norm.max()))
        if norm.max() <= spec.tol:
            if polish:
                trial = zf + _newton_step(sys, zs, zf, u, r, spec, dcfg)
                tn = _col_norm(manifold_residual(sys, zs, trial, u, spec, dcfg))
                keep = tn <= norm
                zf = np.where(keep, trial, zf)
                norm = np.where(keep, tn, norm)
            return zf, norm, history
        if it == spec.max_iters:
            break
        step = _newton_step(sys, zs, zf, u, r, spec, dcfg)
        alpha = np.ones(zf.shape[1])
        pending = np.ones(zf.shape[1], dtype=bool)
        new_zf, new_r, new_norm = zf.copy(), r.copy(), norm.copy()
        for _ in range(11):
            trial = zf + alpha * step
            try:
                tr = manifold_residual(sys, zs, trial, u, spec, dcfg)
                tn = _col_norm(tr)
            except EvaluationError:
                tr, tn = r, np.full_like(norm, np.inf)
            ok = pending & ((tn < norm) | (norm <= spec.tol))
            new_zf[:, ok], new_r[:, ok], new_norm[ok] = trial[:, ok], tr[:, ok], tn[ok]
            pending &= ~ok
            if not pending.any():
                break
            alpha = np.where(pending, 0.5 * alpha, alpha)
        if pending.any():
            # no decrease after 10 halvings: take the smallest damped step
            trial = zf + alpha * step
            tr = manifold_residual(sys, zs, trial, u, spec, dcfg)
            new_zf[:, pending], new_r[:, pending] = trial[:, pending], tr[:, pending]
            new_norm[pending] = _col_norm(tr)[pending]
        zf, r, norm = new_zf, new_r, new_norm
    raise NonConvergenceError(f"{spec.tag} did not converge in {spec.max_iters} iterations "
                              f"(residual {history[-1]:.3e})", history=history,
                              z_s=zs[:, int(np.argmax(norm))].copy())


def _stationarity(sys, zs, zf, u, dcfg):
    rho = curvature_residual(sys, zs, zf, u, dcfg)
    jac = _curvature_jac(sys, zs, zf, u, dcfg, dcfg.fd_step)
    grad = 2.0 * np.einsum("ijb,ib->jb", jac, rho)
    obj = np.sum(rho * rho, axis=0)
    return rho, jac, grad, obj


def _curvature_gauss_newton(sys, zs, zf, u, spec, dcfg):
    history = []
    for it in range(spec.max_iters + 1):
        rho, jac, grad, obj = _stationarity(sys, zs, zf, u, dcfg)
        gnorm = _col_norm(grad)
        crit = gnorm / np.maximum(1.0, obj)
        history.append(float(crit.max()))
        if crit.max() <= spec.tol:
            return zf, gnorm, history
        if it == spec.max_iters:
            break
        jtj = np.einsum("ijb,ikb->bjk", jac, jac)
        rhs = -np.einsum("ijb,ib->bj", jac, rho)
        try:
            step = np.linalg.solve(jtj, rhs[..., None])[..., 0].T
        except np.linalg.LinAlgError:
            raise FoldError("rank-deficient curvature Jacobian") from None
        alpha = np.ones(zf.shape[1])
        pending = crit > spec.tol
        new_zf = zf.copy()
        for _ in range(20):
            trial = zf + alpha * step
            robj = np.sum(curvature_residual(sys, zs, trial, u, dcfg) ** 2, axis=0)
            ok = pending & (robj <= obj)
            new_zf[:, ok] = trial[:, ok]
            pending &= ~ok
            if not pending.any():
                break
            alpha = np.where(pending, 0.5 * alpha, alpha)
        if pending.any() and np.array_equal(new_zf, zf):
            # stagnation: the objective cannot be reduced along the GN step
            break
        zf = new_zf
    raise NonConvergenceError(f"curvature-local stagnated (criterion {history[-1]:.3e})",
                              history=history)


def relax_fast(sys: SpSystem, zs, u, zf0=None, length: float = 5.0,
               dcfg: DerivativeConfig = DEFAULT_DERIV):
    """Integrate the frozen-``z_s`` fast subsystem for ``length`` fast-time units."""
    from .integrate import IntegratorConfig, run_dp54

    zs = np.asarray(zs, dtype=float)
    zf = np.zeros((sys.n_f, zs.shape[1])) if zf0 is None else np.array(zf0, dtype=float)
    u = _batch_control(u, zs.shape[1])

    def f(t, y):
        return sys.fast(zs, y, u)

    cfg = IntegratorConfig(method="dp54", rel_tol=1e-6, abs_tol=1e-9, max_steps=20000)
    return run_dp54(f, zf, 0.0, length, cfg).states[-1]


def solve_batch(sys: SpSystem, zs, u, spec: ManifoldSpec, zf_guess=None,
                dcfg: DerivativeConfig = DEFAULT_DERIV, polish: bool = True):
    """Manifold points for a batch of slow states. Returns ``(zf, residual_norms)``."""
    dcfg = _dcfg_for(spec, dcfg)
    zs = np.asarray(zs, dtype=float)
    u = _batch_control(u, zs.shape[1])
    if zf_guess is None:
        try:
            zf_guess = relax_fast(sys, zs, u, dcfg=dcfg)
        except (IntegrationError, EvaluationError) as exc:
            raise ManifoldError(f"relaxation for the initial guess failed: {exc}") from exc
    zf = np.array(zf_guess, dtype=float).reshape(sys.n_f, zs.shape[1])
    if spec.method == "zdp":
        zf, norm, _ = _zdp_newton(sys, zs, zf, u, spec, dcfg, polish=polish)
    elif spec.method == "curvature-local":
        zf, norm, _ = _curvature_gauss_newton(sys, zs, zf, u, spec, dcfg)
    else:
        pts = [curvature_bvp_solve(sys, zs[:, j], u[:, j], spec, None, dcfg)
               for j in range(zs.shape[1])]
        return np.stack([p.z_f for p in pts], axis=1), np.array([p.residual_norm for p in pts])
    return zf, norm


class ManifoldTracker:
    """Warm-started manifold solves along a continuous slow path (batched).

    Holds the last fast solution as the next Newton guess; one tracker per
    concurrent task.
    """

    def __init__(self, sys: SpSystem, spec: ManifoldSpec,
                 dcfg: DerivativeConfig = DEFAULT_DERIV):
        if spec.method == "curvature-bvp":
            raise ContractError("curvature-bvp cannot be embedded in a right-hand side")
        self.sys = sys
        self.spec = spec
        self.dcfg = _dcfg_for(spec, dcfg)
        self.fast: Optional[np.ndarray] = None
        self.solves = 0

    def start(self, zs, u, guess=None, t=None):
        try:
            zf, _ = solve_batch(self.sys, zs, u, self.spec, guess, self.dcfg)
        except ManifoldError as exc:
            exc.t = t
            raise
        self.fast = zf
        self.solves += 1
        return zf

    def solve(self, zs, u, t=None):
        if self.fast is None or self.fast.shape[1] != zs.shape[1]:
            return self.start(zs, u, t=t)
        try:
            if self.spec.method == "zdp":
                zf, _, _ = _zdp_newton(self.sys, zs, self.fast, _batch_control(u, zs.shape[1]),
                                       self.spec, self.dcfg)
            else:
                zf, _, _ = _curvature_gauss_newton(self.sys, zs, self.fast,
                                                   _batch_control(u, zs.shape[1]),
                                                   self.spec, self.dcfg)
        except ManifoldError as exc:
            exc.t = t
            if exc.z_s is None:
                exc.z_s = zs[:, 0].copy()
            raise
        except EvaluationError as exc:
            raise ManifoldError(f"manifold solve failed at t={t}: {exc}", t=t,
                                z_s=zs[:, 0].copy()) from exc
        self.fast = zf
        self.solves += 1
        return zf

    def reduced_rhs(self, u):
        u = np.asarray(u, dtype=float)

        def f(t, zs):
            zf = self.solve(zs, u, t)
            return self.sys.slow(zs, zf, _batch_control(u, zs.shape[1]))

        return f

    def along(self, times, states, u):
        """Fast parts for stored slow states ``(K, n_s, B)``, solved in order."""
        out = np.empty((len(times), self.sys.n_f, states.shape[2]))
        for k, (t, zs) in enumerate(zip(times, states)):
            out[k] = self.solve(zs, u, t)
        return out


# ---------------------------------------------------------------------------
# public single-point API


def _prep(sys, zs, u, spec, method):
    if spec.method != method:
        raise ContractError(f"spec.method is {spec.method!r}, expected {method!r}")
    zs = np.atleast_1d(np.asarray(zs, dtype=float))
    if zs.shape != (sys.n_s,):
        raise ContractError(f"z_s must have shape ({sys.n_s},)")
    return zs, as_control(sys, u)


def zdp_solve(sys: SpSystem, zs, u=None, spec: ManifoldSpec = ManifoldSpec(),
              zf_guess=None, dcfg: DerivativeConfig = DEFAULT_DERIV) -> ManifoldPoint:
    """Zero Derivative Principle point: ``eps**m g_m(z_s, z_f, u) = 0``."""
    zs, u = _prep(sys, zs, u, spec, "zdp")
    guess = None if zf_guess is None else np.atleast_1d(zf_guess)[:, None]
    if guess is not None and not np.all(np.isfinite(guess)):
        raise ContractError("z_f guess must be finite")
    zf, norm = solve_batch(sys, zs[:, None], u[:, None], spec, guess, dcfg)
    return ManifoldPoint(zs, zf[:, 0], u, float(norm[0]), spec.tag)


def curvature_local_solve(sys: SpSystem, zs, u=None,
                          spec: ManifoldSpec = ManifoldSpec(method="curvature-local"),
                          zf_guess=None, dcfg: DerivativeConfig = DEFAULT_DERIV) -> ManifoldPoint:
    """Minimiser over ``z_f`` of the curvature ``||zddot||^2`` at fixed ``z_s``."""
    zs, u = _prep(sys, zs, u, spec, "curvature-local")
    guess = None if zf_guess is None else np.atleast_1d(zf_guess)[:, None]
    zf, norm = solve_batch(sys, zs[:, None], u[:, None], spec, guess, dcfg)
    return ManifoldPoint(zs, zf[:, 0], u, float(norm[0]), spec.tag)


def curvature_bvp_solve(sys: SpSystem, zs, u=None,
                        spec: ManifoldSpec = ManifoldSpec(method="curvature-bvp"),
                        guess=None, dcfg: DerivativeConfig = DEFAULT_DERIV,
                        nlp_options=None) -> ManifoldPoint:
    """Curvature-minimising trajectory ending with slow part ``z_s``.

    Single shooting: the NLP variables are the full initial state; the
    constraint is ``z_s(t0 + T) = z_s``. ``guess`` is an initial state.
    """
    from .integrate import IntegratorConfig, run_dp54, run_system
    from .nlp import NlpOptions, NlpProblem, solve as nlp_solve

    target, u = _prep(sys, zs, u, spec, "curvature-bvp")
    dcfg = _dcfg_for(spec, dcfg)
    n, ns = sys.n, sys.n_s
    horizon = spec.bvp_horizon
    icfg = IntegratorConfig(method="radau2a", rel_tol=1e-10, abs_tol=1e-12, newton_tol=1e-12)
    u2 = u[:, None]

    if guess is None:
        # backward reduced flow from the target gives the slow start
        local = ManifoldSpec(method="zdp", m=0, tol=spec.tol)
        tracker = ManifoldTracker(sys, local, dcfg)
        try:
            tracker.start(target[:, None], u2)
            fwd = tracker.reduced_rhs(u2)
            back = run_dp54(lambda t, y: -fwd(t, y), target[:, None], 0.0, horizon,
                            IntegratorConfig(rel_tol=1e-8, abs_tol=1e-10))
            zs0 = back.states[-1]
            zf0 = tracker.solve(zs0, u2)
            x0 = np.concatenate([zs0, zf0])[:, 0]
        except (ManifoldError, IntegrationError, EvaluationError):
            x0 = np.concatenate([target, np.zeros(sys.n_f)])
    else:
        x0 = np.asarray(guess, dtype=float).reshape(n)

    cache: dict = {}

    def endpoints(x):
        key = x.tobytes()
        if key not in cache:
            h = 1e-6 * np.maximum(1.0, np.abs(x))
            cols = [x] + [x + h[i] * e for i, e in enumerate(np.eye(n))] \
                + [x - h[i] * e for i, e in enumerate(np.eye(n))]
            y0 = np.stack(cols, axis=1)
            try:
                res = run_system(sys, y0, u2, 0.0, horizon, icfg, dcfg=dcfg)
            except (IntegrationError, EvaluationError) as exc:
                raise NlpFailure(f"inner integration failed: {exc}", phase="curvature-bvp") from exc
            end = res.states[-1]
            jac = (end[:ns, 1:n + 1] - end[:ns, n + 1:]) / (2.0 * h[None, :])
            cache.clear()
            cache[key] = (end[:, 0], jac)
        return cache[key]

    def objective(x):
        rho = curvature_residual(sys, x[:ns, None], x[ns:, None], u2, dcfg)[:, 0]
        return float(rho @ rho)

    def gradient(x):
        def rho(y):
            b = y.shape[1]
            return curvature_residual(sys, y[:ns], y[ns:], np.tile(u2, (1, b)), dcfg)

        r = rho(x[:, None])[:, 0]
        jac = fd_jacobian(rho, x[:, None], dcfg.fd_step)[:, :, 0]
        return 2.0 * jac.T @ r

    lb = -np.inf * np.ones(n) if spec.bvp_lower is None else np.asarray(spec.bvp_lower, float)
    ub = np.inf * np.ones(n) if spec.bvp_upper is None else np.asarray(spec.bvp_upper, float)
    prob = NlpProblem(
        n=n, objective=objective, gradient=gradient,
        constraints=lambda x: endpoints(x)[0][:ns] - target,
        jacobian=lambda x: endpoints(x)[1],
        lb=lb, ub=ub, x0=x0)
    opts = nlp_options or NlpOptions(tol=max(spec.tol, 1e-10), max_iters=max(100, spec.max_iters))
    try:
        res = nlp_solve(prob, opts)
    except NlpFailure:
        raise
    if res.status != "converged":
        raise NlpFailure(f"curvature-bvp NLP ended with status {res.status}", result=res,
                         phase="curvature-bvp")
    end, _ = endpoints(res.x_star)
    viol = float(np.max(np.abs(end[:ns] - target)))
    return ManifoldPoint(target, end[ns:].copy(), u, viol, spec.tag)


def solve_point(sys: SpSystem, zs, u=None, spec: ManifoldSpec = ManifoldSpec(),
                zf_guess=None, dcfg: DerivativeConfig = DEFAULT_DERIV) -> ManifoldPoint:
    if spec.method == "zdp":
        return zdp_solve(sys, zs, u, spec, zf_guess, dcfg)
    if spec.method == "curvature-local":
        return curvature_local_solve(sys, zs, u, spec, zf_guess, dcfg)
    return curvature_bvp_solve(sys, zs, u, spec, None, dcfg)


def ift_sensitivities(sys: SpSystem, point: ManifoldPoint, spec: ManifoldSpec,
                      dcfg: DerivativeConfig = DEFAULT_DERIV):
    """``h_zs = -(dr/dz_f)^-1 dr/dz_s`` and ``h_u = -(dr/dz_f)^-1 dr/du``."""
    if spec.method == "curvature-bvp":
        raise ContractError("curvature-bvp has no algebraic residual for implicit differentiation")
    dcfg = _dcfg_for(spec, dcfg)
    zs, zf, u = point.z_s[:, None], point.z_f[:, None], point.u[:, None]
    ns, nf = sys.n_s, sys.n_f
    if spec.method == "zdp" and spec.m == 0 and dcfg.uses_analytic(sys):
        jb = _jacobian_batch(sys, zs, zf, u, dcfg)
        r_zs, r_zf, r_u = jb.d_ff_dzs[..., 0], jb.d_ff_dzf[..., 0], jb.d_ff_du[..., 0]
    else:
        levels = residual_levels(sys, spec, dcfg) + 1
        rel = _nested_rel(levels, dcfg)

        def r(x):
            return manifold_residual(sys, x[:ns], x[ns:ns + nf], x[ns + nf:], spec, dcfg, rel=rel)

        full = fd_jacobian(r, np.concatenate([zs, zf, u]), rel)[:, :, 0]
        r_zs, r_zf, r_u = full[:, :ns], full[:, ns:ns + nf], full[:, ns + nf:]
    if not np.all(np.isfinite(r_zf)) or np.linalg.cond(r_zf) > 1e13:
        raise FoldError("singular dr/dz_f: manifold fold at this point", z_s=point.z_s)
    h_zs = -np.linalg.solve(r_zf, r_zs)
    h_u = -np.linalg.solve(r_zf, r_u) if sys.n_u else np.zeros((nf, 0))
    return h_zs, h_u
