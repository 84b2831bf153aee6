"""SQP solver for ``min f(x)  s.t.  c(x) = 0,  lb <= x <= ub``.

Each iteration solves a convex QP with a damped-BFGS Hessian. The QP is
handled by a dual active-set method (Goldfarb-Idnani style): start from the
equality-constrained minimiser and add violated bounds one at a time while
keeping the bound multipliers non-negative. Globalisation is a backtracking
line search on the l1 merit ``f + nu ||c||_1`` with one second-order
correction attempt.

Multiplier convention of the results: ``grad f + J^T lam - z = 0`` with
``z_i >= 0`` at active lower bounds and ``z_i <= 0`` at active upper bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractError

STATUSES = ("converged", "max-iters", "infeasible", "line-search-failure")


class GradientCheckError(ContractError):
    """User derivative disagrees with central differences."""


@dataclass
class NlpProblem:
    n: int
    objective: Callable[[np.ndarray], float]
    x0: np.ndarray
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constraints: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.lb = np.full(self.n, -np.inf) if self.lb is None else np.asarray(self.lb, float).copy()
        self.ub = np.full(self.n, np.inf) if self.ub is None else np.asarray(self.ub, float).copy()
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.n,) or self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ContractError("x0, lb and ub must all have length n")
        if np.any(self.lb > self.ub):
            raise ContractError("lb must not exceed ub")
        if not np.all(np.isfinite(x0)):
            raise ContractError("x0 must be finite")
        self.x0 = np.clip(x0, self.lb, self.ub)

    def grad(self, x):
        if self.gradient is not None:
            return np.asarray(self.gradient(x), dtype=float)
        return _fd_gradient(self.objective, x)

    def cons(self, x):
        if self.constraints is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.constraints(x), dtype=float))

    def jac(self, x, m):
        if self.constraints is None:
            return np.zeros((0, self.n))
        if self.jacobian is not None:
            return np.asarray(self.jacobian(x), dtype=float).reshape(m, self.n)
        return _fd_jacobian(self.cons, x, m)


@dataclass(frozen=True)
class NlpOptions:
    tol: float = 1e-8
    constraint_tol: Optional[float] = None
    max_iters: int = 200
    max_line_search: int = 30
    armijo: float = 1e-4
    check_gradients: bool = False
    log: Optional[Callable[[str], None]] = None

    @property
    def ctol(self) -> float:
        return self.tol if self.constraint_tol is None else self.constraint_tol


@dataclass
class NlpResult:
    x_star: np.ndarray
    objective_value: float
    kkt_residual: float
    constraint_violation: float
    iterations: int
    status: str
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bound_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active_lower: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    active_upper: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    iterates: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _fd_gradient(f, x, rel=1e-6):
    g = np.empty_like(x)
    for i in range(len(x)):
        h = rel * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _fd_jacobian(c, x, m, rel=1e-6):
    jac = np.empty((m, len(x)))
    for i in range(len(x)):
        h = rel * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        jac[:, i] = (c(x + e) - c(x - e)) / (2 * h)
    return jac


# ---------------------------------------------------------------------------
# QP subproblem


@dataclass
class QpResult:
    d: np.ndarray
    lam: np.ndarray  # equality multipliers, B d + g = A^T lam + z
    z: np.ndarray  # bound multipliers, signed (lower > 0, upper < 0)
    status: str
    iterations: int


def _kkt_solve(B, rows, rhs_top, rhs_bottom):
    n = B.shape[0]
    k = rows.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = B
    K[:n, n:] = rows.T
    K[n:, :n] = rows
    rhs = np.concatenate([rhs_top, rhs_bottom])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve_qp(B, g, A, b, lo, hi, feas_tol: float = 1e-12, max_iter: Optional[int] = None) -> QpResult:
    """Dual active-set solve of ``min 1/2 d'Bd + g'd  s.t.  A d = b,  lo <= d <= hi``.

    ``B`` must be symmetric positive definite.
    """
    n = len(g)
    m = A.shape[0]
    # inequality p < n: d_p >= lo_p ; p >= n: -d_{p-n} >= -hi_{p-n}
    normals = np.vstack([np.eye(n), -np.eye(n)])
    rhs_ineq = np.concatenate([lo, -hi])
    finite = np.isfinite(rhs_ineq)
    active: list[int] = []
    mu: list[float] = []

    def rows():
        return np.vstack([A, normals[active]]) if active else A

    d, w = _kkt_solve(B, A, -g, b)
    if m and np.max(np.abs(A @ d - b)) > 1e-8 * (1 + np.max(np.abs(b))):
        return QpResult(d, np.zeros(m), np.zeros(n), "infeasible", 0)
    nu_eq = -w[:m]
    cap = max_iter or 10 * (n + m) + 50
    scale = 1.0 + np.max(np.abs(np.where(finite, rhs_ineq, 0.0)), initial=0.0)
    it = 0
    while it < cap:
        it += 1
        slack = normals @ d - rhs_ineq
        slack[~finite] = np.inf
        slack[active] = np.inf
        p = int(np.argmin(slack))
        if slack[p] >= -feas_tol * scale:
            break
        mu_p = 0.0
        while True:
            it += 1
            if it > cap:
                return QpResult(d, nu_eq, _signed(active, mu, n), "max-iters", it)
            zdir, r = _kkt_solve(B, rows(), normals[p], np.zeros(m + len(active)))
            r_act = r[m:]
            t1, block = np.inf, -1
            for j, (rj, muj) in enumerate(zip(r_act, mu)):
                if rj > 1e-14 and muj / rj < t1:
                    t1, block = muj / rj, j
            zn = zdir @ normals[p]
            t2 = np.inf if np.max(np.abs(zdir), initial=0.0) <= 1e-14 or zn <= 1e-300 \
                else -(normals[p] @ d - rhs_ineq[p]) / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                return QpResult(d, nu_eq, _signed(active, mu, n), "infeasible", it)
            if np.isfinite(t2):
                d = d + t * zdir
            nu_eq = nu_eq - t * r[:m]
            mu = [muj - t * rj for muj, rj in zip(mu, r_act)]
            mu_p += t
            if t == t2:
                active.append(p)
                mu.append(mu_p)
                break
            del active[block]
            del mu[block]
    return QpResult(d, nu_eq, _signed(active, mu, n), "optimal", it)


def _signed(active, mu, n):
    z = np.zeros(n)
    for p, val in zip(active, mu):
        if p < n:
            z[p] += val
        else:
            z[p - n] -= val
    return z


# ---------------------------------------------------------------------------
# SQP driver


def _kkt(x, g, jac, lam, lb, ub):
    lag = g + jac.T @ lam
    return float(np.max(np.abs(np.clip(x - lag, lb, ub) - x), initial=0.0)), lag


def _check_gradients(p: NlpProblem, m: int):
    x = p.x0
    if p.gradient is not None:
        user, fd = p.grad(x), _fd_gradient(p.objective, x)
        if np.max(np.abs(user - fd)) > 1e-4 * max(1.0, np.max(np.abs(fd))):
            raise GradientCheckError("objective gradient disagrees with central differences")
    if m and p.jacobian is not None:
        user, fd = p.jac(x, m), _fd_jacobian(p.cons, x, m)
        if np.max(np.abs(user - fd)) > 1e-4 * max(1.0, np.max(np.abs(fd))):
            raise GradientCheckError("constraint Jacobian disagrees with central differences")


def solve(p: NlpProblem, opts: NlpOptions = NlpOptions()) -> NlpResult:
    """Run SQP from ``p.x0`` (clipped into the bounds)."""
    lb, ub = p.lb, p.ub
    x = p.x0.copy()
    c = p.cons(x)
    m = len(c)
    if opts.check_gradients:
        _check_gradients(p, m)
    f = float(p.objective(x))
    g = p.grad(x)
    jac = p.jac(x, m)
    on_free = (x > lb) & (x < ub)
    lam = (np.linalg.lstsq(jac[:, on_free].T, -g[on_free], rcond=None)[0]
           if m and on_free.any() else np.zeros(m))
    B = np.eye(p.n)
    nu = 0.0
    neg_curv = 0
    iterates = [x.copy()]
    status = "max-iters"
    k = 0
    stat, _ = _kkt(x, g, jac, lam, lb, ub)
    viol = float(np.max(np.abs(c), initial=0.0))

    def log(msg):
        if opts.log is not None:
            opts.log(msg)

    for k in range(opts.max_iters + 1):
        stat, _ = _kkt(x, g, jac, lam, lb, ub)
        viol = float(np.max(np.abs(c), initial=0.0))
        if stat <= opts.tol and viol <= opts.ctol:
            status = "converged"
            break
        if k == opts.max_iters:
            break
        if m and viol > opts.ctol:
            # stationary point of the infeasibility 1/2 ||c||^2: no step can restore
            jtc = jac.T @ c
            proj = float(np.max(np.abs(np.clip(x - jtc, lb, ub) - x), initial=0.0))
            if proj <= 1e-8 * viol:
                status = "infeasible"
                break
        qp = solve_qp(B, g, jac, -c, lb - x, ub - x)
        restoring = qp.status != "optimal"
        if restoring:
            # feasibility restoration: Gauss-Newton step on 1/2 ||c||^2
            jtc = jac.T @ c
            rqp = solve_qp(jac.T @ jac + 1e-8 * (1 + np.max(np.abs(jac), initial=0)) * np.eye(p.n),
                           jtc, np.zeros((0, p.n)), np.zeros(0), lb - x, ub - x)
            d = rqp.d if rqp.status == "optimal" else np.zeros(p.n)
            proj = float(np.max(np.abs(np.clip(x - jtc, lb, ub) - x), initial=0.0))
            if viol > opts.ctol and (proj <= 1e-10 * max(1.0, viol) or np.max(np.abs(d)) <= 1e-14):
                status = "infeasible"
                break
            lam_new = lam
        else:
            d = qp.d
            lam_new = -qp.lam
        nu = max(nu, 1.1 * float(np.max(np.abs(lam_new), initial=0.0)) + 1e-6)
        phi = f + nu * np.sum(np.abs(c))
        if restoring:
            phi = float(np.sum(c * c))
            deriv = 2.0 * float(c @ (jac @ d))
        else:
            deriv = float(g @ d) - nu * float(np.sum(np.abs(c)))

        def merit(xt):
            ft = float(p.objective(xt))
            ct = p.cons(xt)
            if restoring:
                return float(np.sum(ct * ct)), ft, ct
            return ft + nu * float(np.sum(np.abs(ct))), ft, ct

        alpha = 1.0
        accepted = False
        for ls in range(opts.max_line_search):
            xt = np.clip(x + alpha * d, lb, ub)
            try:
                phit, ft, ct = merit(xt)
            except (ArithmeticError, ValueError):
                phit = np.inf
            if np.isfinite(phit) and phit <= phi + opts.armijo * alpha * min(deriv, 0.0):
                accepted = True
                break
            if ls == 0 and m and not restoring and np.isfinite(phit):
                # second-order correction
                soc = solve_qp(B, g, jac, jac @ d - ct, lb - x, ub - x)
                if soc.status == "optimal":
                    xs = np.clip(x + soc.d, lb, ub)
                    try:
                        phis, fs_, cs_ = merit(xs)
                    except (ArithmeticError, ValueError):
                        phis = np.inf
                    if np.isfinite(phis) and phis <= phi + opts.armijo * min(deriv, 0.0):
                        xt, ft, ct, phit = xs, fs_, cs_, phis
                        accepted = True
                        break
            alpha *= 0.5
        if not accepted:
            status = "line-search-failure"
            break
        s = xt - x
        g_new = p.grad(xt)
        jac_new = p.jac(xt, m)
        y = (g_new + jac_new.T @ lam_new) - (g + jac.T @ lam_new)
        if not restoring:
            lam = lam_new
        sBs = float(s @ B @ s)
        sy = float(s @ y)
        if k == 0 and sy > 1e-16 * float(s @ s):
            B = (float(y @ y) / sy) * np.eye(p.n)
            sBs = float(s @ B @ s)
        if sBs > 1e-300:
            if sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1 - theta) * (B @ s)
                sy = float(s @ y)
                neg_curv = neg_curv + 1 if s @ (g_new - g) < 0 else 0
            else:
                neg_curv = 0
            Bs = B @ s
            B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
            B = 0.5 * (B + B.T)
        if neg_curv >= 5 or not np.all(np.isfinite(B)):
            B = np.eye(p.n)
            neg_curv = 0
        log(f"iter {k:4d}  merit {phit: .10e}  step {np.max(np.abs(s), initial=0):.3e}  "
            f"kkt {stat:.3e}  viol {viol:.3e}")
        x, f, c, g, jac = xt, ft, ct, g_new, jac_new
        iterates.append(x.copy())
    k_done = k
    lag = g + jac.T @ lam
    at_lo = np.isclose(x, lb, rtol=0, atol=1e-12 * (1 + np.abs(lb))) & np.isfinite(lb)
    at_hi = np.isclose(x, ub, rtol=0, atol=1e-12 * (1 + np.abs(ub))) & np.isfinite(ub)
    z = np.where(at_lo | at_hi, lag, 0.0)
    return NlpResult(x, f, stat, viol, k_done, status, lam.copy(), z, at_lo, at_hi, iterates)
