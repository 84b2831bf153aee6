"""Direct multiple shooting for the full, reduced and lifted formulations.

Decision vector layout (``nx`` node states, ``nu`` controls per interval)::

    [x_0, u_0, x_1, u_1, ..., x_{N-1}, u_{N-1}, x_N]

Node states are ``(z_s, z_f)`` for ``full`` and ``lifted`` and ``z_s`` for
``reduced``. The system is autonomous, so all ``N`` intervals have the same
length and are integrated together as one batch. Derivatives come from
central differences evaluated inside that same batch, which keeps every
perturbed copy on the nominal step sequence.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .calculus import DEFAULT as DEFAULT_DERIV
from .calculus import DerivativeConfig, fd_jacobian, flow_jacobian_batch, nested_step
from .errors import (ContractError, EvaluationError, IntegrationError, ManifoldError,
                     NlpFailure, TranscriptionError)
from .integrate import (IntegratorConfig, IntegratorStats, Trajectory, run_dp54, run_radau2a,
                        run_system)
from .manifold import ManifoldSpec, ManifoldTracker, manifold_residual, residual_levels
from .model import BenchmarkEntry, SpSystem
from .nlp import NlpOptions, NlpProblem, NlpResult, solve

FORMULATIONS = ("full", "reduced", "lifted")
N_SAMPLES = 201

Cost = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OcpProblem:
    """Bolza-free optimal control problem with piecewise-constant controls.

    ``zf0_policy`` is ``"on-manifold"`` (start on ``f_f = 0``) or ``"given"``
    (use ``zf0``). Only the full formulation has a free fast initial value,
    so the policy is ignored by the other two.
    """

    sys: SpSystem
    running_cost: Cost
    horizon: float
    zs0: np.ndarray
    formulation: str = "full"
    manifold: Optional[ManifoldSpec] = None
    N: int = 20
    zf0_policy: str = "on-manifold"
    zf0: Optional[np.ndarray] = None
    integrator: IntegratorConfig = IntegratorConfig(rel_tol=1e-8, abs_tol=1e-10)
    nlp: NlpOptions = NlpOptions(tol=1e-6, constraint_tol=1e-9, max_iters=300)
    derivatives: DerivativeConfig = DEFAULT_DERIV
    fd_step: float = 1e-6
    quadrature: str = "state"

    def __post_init__(self):
        object.__setattr__(self, "zs0", np.atleast_1d(np.asarray(self.zs0, dtype=float)))
        if self.formulation not in FORMULATIONS:
            raise ContractError(f"unknown formulation {self.formulation!r}; choose from {FORMULATIONS}")
        if not self.horizon > 0:
            raise ContractError("horizon must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise ContractError("N must be a positive integer")
        if self.zs0.shape != (self.sys.n_s,):
            raise ContractError(f"zs0 must have shape ({self.sys.n_s},)")
        if self.formulation == "full" and self.manifold is not None:
            raise ContractError("the full formulation takes no manifold spec")
        if self.formulation != "full":
            spec = self.manifold or ManifoldSpec()
            if spec.method == "curvature-bvp":
                raise ContractError("curvature-bvp cannot be embedded in shooting intervals")
            object.__setattr__(self, "manifold", spec)
        if self.zf0_policy not in ("on-manifold", "given"):
            raise ContractError("zf0_policy must be 'on-manifold' or 'given'")
        if self.zf0_policy == "given":
            if self.zf0 is None:
                raise ContractError("zf0_policy 'given' needs zf0")
            object.__setattr__(self, "zf0", np.atleast_1d(np.asarray(self.zf0, dtype=float)))
            if self.zf0.shape != (self.sys.n_f,):
                raise ContractError(f"zf0 must have shape ({self.sys.n_f},)")
        if self.formulation == "full" and self.integrator.method != "radau2a":
            object.__setattr__(self, "integrator",
                               dataclasses.replace(self.integrator, method="radau2a"))
        if self.formulation != "full" and self.integrator.method != "dp54":
            object.__setattr__(self, "integrator",
                               dataclasses.replace(self.integrator, method="dp54"))
        if not self.fd_step > 0:
            raise ContractError("fd_step must be positive")
        if self.quadrature not in ("state", "trapezoid"):
            raise ContractError("quadrature must be 'state' or 'trapezoid'")

    @classmethod
    def from_benchmark(cls, entry: BenchmarkEntry, formulation: str = "full", **kw) -> "OcpProblem":
        if entry.ocp is None:
            raise ContractError(f"benchmark {entry.name!r} has no optimal control problem")
        data = entry.ocp
        if data.zf0 is not None and "zf0_policy" not in kw:
            kw.update(zf0_policy="given", zf0=data.zf0)
        return cls(entry.system, data.running_cost, data.horizon, data.zs0, formulation, **kw)

    def with_formulation(self, formulation: str, manifold: Optional[ManifoldSpec] = None,
                         **kw) -> "OcpProblem":
        if formulation == "full":
            manifold = None
        elif manifold is None:
            manifold = self.manifold or ManifoldSpec()
        integ = kw.pop("integrator", dataclasses.replace(
            self.integrator, method="radau2a" if formulation == "full" else "dp54"))
        return dataclasses.replace(self, formulation=formulation, manifold=manifold,
                                   integrator=integ, **kw)

    @property
    def nx(self) -> int:
        return self.sys.n_s if self.formulation == "reduced" else self.sys.n

    @property
    def n_vars(self) -> int:
        return (self.N + 1) * self.nx + self.N * self.sys.n_u

    @property
    def interval(self) -> float:
        return self.horizon / self.N

    def node_times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.N + 1)

    def sample_times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, N_SAMPLES)


@dataclass
class OcpSolution:
    formulation: str
    trajectory: Trajectory
    samples: Trajectory
    objective: float
    nlp: NlpResult
    x: np.ndarray
    wall_time_seconds: dict
    stats: IntegratorStats = field(default_factory=IntegratorStats)
    node_residual: Optional[np.ndarray] = None
    evaluations: int = 0

    @property
    def converged(self) -> bool:
        return self.nlp.converged


# ---------------------------------------------------------------------------
# decision-vector layout


@dataclass(frozen=True)
class Layout:
    N: int
    nx: int
    nu: int

    @property
    def size(self) -> int:
        return (self.N + 1) * self.nx + self.N * self.nu

    def x_index(self, k: int) -> np.ndarray:
        start = k * (self.nx + self.nu)
        return np.arange(start, start + self.nx)

    def u_index(self, k: int) -> np.ndarray:
        start = k * (self.nx + self.nu) + self.nx
        return np.arange(start, start + self.nu)

    def split(self, w: np.ndarray):
        """Node states ``(nx, N+1)`` and controls ``(nu, N)``."""
        stride = self.nx + self.nu
        body = w[: self.N * stride].reshape(self.N, stride)
        xs = np.concatenate([body[:, : self.nx], w[self.N * stride:][None, :]], axis=0).T
        us = body[:, self.nx:].T
        return xs, us

    def join(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float).reshape(self.nx, self.N + 1)
        us = np.asarray(us, dtype=float).reshape(self.nu, self.N)
        body = np.concatenate([xs[:, : self.N], us], axis=0).T.reshape(-1)
        return np.concatenate([body, xs[:, self.N]])


# ---------------------------------------------------------------------------
# batched interval evaluation


def _trapezoid(times: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Trapezoid rule along axis 0 of ``vals`` (shape ``(K, B)``)."""
    if len(times) < 2:
        return np.zeros(vals.shape[1:])
    dt = np.diff(times)
    return np.einsum("k,kb->b", dt, 0.5 * (vals[1:] + vals[:-1]))


class _Intervals:
    """Integrates a batch of shooting intervals with the formulation's dynamics.

    With ``quadrature="state"`` the running cost is appended as an extra
    state ``q' = L`` and integrated by the same method; ``"trapezoid"``
    applies the trapezoid rule to the accepted step endpoints.
    """

    def __init__(self, p: OcpProblem):
        self.p = p
        self.sys = p.sys
        self.stats = IntegratorStats()

    def _cost(self, zs, zf, us):
        return np.asarray(self.p.running_cost(zs, zf, us), dtype=float).reshape(1, zs.shape[1])

    def _full(self, starts, us, t_eval, with_q):
        p, sys = self.p, self.sys
        n = sys.n
        if not with_q:
            return run_system(sys, starts, us, 0.0, p.interval, p.integrator, t_eval, p.derivatives)
        rel = p.derivatives.fd_step

        def f(t, y):
            z = y[:n]
            return np.concatenate([sys.flow(z, us), self._cost(z[: sys.n_s], z[sys.n_s:], us)])

        def jac(t, y):
            z = y[:n]
            b = z.shape[1]
            out = np.zeros((n + 1, n + 1, b))
            out[:n, :n] = flow_jacobian_batch(sys, z, us, p.derivatives)
            out[n, :n] = fd_jacobian(
                lambda x: self._cost(x[: sys.n_s], x[sys.n_s:],
                                     np.tile(us, (1, x.shape[1] // b))), z, rel)[0]
            return out

        y0 = np.concatenate([starts, np.zeros((1, starts.shape[1]))])
        return run_radau2a(f, jac, y0, 0.0, p.interval, p.integrator, t_eval)

    def run(self, starts: np.ndarray, us: np.ndarray, fast_guess=None, t_eval=None,
            dense: bool = False):
        """Integrate all columns over one interval length.

        Returns ``(times, slow (K,n_s,B), fast, cost (B,))``. ``fast`` is
        ``(K,n_f,B)`` for the full formulation or when ``dense`` is set, and
        ``None`` otherwise.
        """
        p, sys = self.p, self.sys
        with_q = p.quadrature == "state"
        zf = None
        if p.formulation == "full":
            res = self._full(starts, us, t_eval, with_q)
            zs, zf = res.states[:, : sys.n_s], res.states[:, sys.n_s:sys.n]
        else:
            tracker = ManifoldTracker(sys, p.manifold, p.derivatives)
            fast0 = tracker.start(starts, us, guess=fast_guess, t=0.0)
            ns = sys.n_s

            def f(t, y):
                fast = tracker.solve(y[:ns], us, t)
                dz = sys.slow(y[:ns], fast, us)
                if not with_q:
                    return dz
                return np.concatenate([dz, self._cost(y[:ns], fast, us)])

            y0 = starts if not with_q else np.concatenate([starts, np.zeros((1, starts.shape[1]))])
            res = run_dp54(f, y0, 0.0, p.interval, p.integrator, t_eval)
            zs = res.states[:, :ns]
            if dense or not with_q:
                tracker.fast = fast0
                zf = tracker.along(res.times, zs, us)
        self.stats.add(res.stats)
        if with_q:
            cost = res.states[-1, -1].copy()
        else:
            vals = np.stack([self._cost(zs[i], zf[i], us)[0] for i in range(len(res.times))])
            cost = _trapezoid(res.times, vals)
        return res.times, zs, zf, cost


class _Shooting:
    """Objective, constraints and their derivatives for one formulation."""

    def __init__(self, p: OcpProblem):
        self.p = p
        self.sys = p.sys
        self.layout = Layout(p.N, p.nx, p.sys.n_u)
        self.intervals = _Intervals(p)
        self._value_cache = (None, None)
        self._deriv_cache = (None, None)
        self.evaluations = 0
        # columns of the interval start that are perturbed for sensitivities
        self.n_perturb = p.sys.n if p.formulation == "full" else p.sys.n_s
        if p.formulation == "lifted":
            levels = residual_levels(p.sys, p.manifold, p.derivatives)
            self._r_rel = nested_step(levels + 1, p.derivatives)

    # -- helpers -----------------------------------------------------------

    def _integrate(self, xs, us, perturb: bool):
        """Chained slow/full interval ends and quadratures, nominal plus FD copies."""
        sys, p = self.sys, self.p
        N = p.N
        starts = xs[: self.n_perturb, :N]
        guess = xs[sys.n_s:, :N] if p.formulation == "lifted" else None
        blocks_s, blocks_u, blocks_g = [starts], [us], [guess]
        steps = []
        if perturb:
            params = np.concatenate([starts, us], axis=0)
            hs = p.fd_step * np.maximum(1.0, np.abs(params))
            for j in range(params.shape[0]):
                steps.append(hs[j])
                for sign in (1.0, -1.0):
                    q = params.copy()
                    q[j] += sign * hs[j]
                    blocks_s.append(q[: starts.shape[0]])
                    blocks_u.append(q[starts.shape[0]:])
                    blocks_g.append(guess)
        s0 = np.concatenate(blocks_s, axis=1)
        u0 = np.concatenate(blocks_u, axis=1)
        g0 = None if guess is None else np.concatenate(blocks_g, axis=1)
        self.evaluations += 1
        try:
            _, zs, zf, q = self.intervals.run(s0, u0, g0)
        except (ManifoldError, IntegrationError, EvaluationError) as exc:
            node = self._locate_failure(xs, us)
            raise TranscriptionError(f"interval evaluation failed at node {node}: {exc}",
                                     node=node) from exc
        last = zs[-1] if p.formulation != "full" else np.concatenate([zs[-1], zf[-1]], axis=0)
        return last, q, steps

    def _locate_failure(self, xs, us) -> Optional[int]:
        sys, p = self.sys, self.p
        for k in range(p.N):
            start = xs[: self.n_perturb, k:k + 1]
            guess = xs[sys.n_s:, k:k + 1] if p.formulation == "lifted" else None
            try:
                self.intervals.run(start, us[:, k:k + 1], guess)
            except (ManifoldError, IntegrationError, EvaluationError):
                return k
        return None

    def _node_controls(self, us):
        return np.concatenate([us, us[:, -1:]], axis=1)

    def node_residual(self, xs, us):
        sys = self.sys
        return manifold_residual(sys, xs[: sys.n_s], xs[sys.n_s:], self._node_controls(us),
                                 self.p.manifold, self.p.derivatives)

    def _initial_rows(self, xs, us):
        p, sys = self.p, self.sys
        rows = [xs[: sys.n_s, 0] - p.zs0]
        if p.formulation == "full":
            if p.zf0_policy == "given":
                rows.append(xs[sys.n_s:, 0] - p.zf0)
            else:
                rows.append(sys.fast(xs[: sys.n_s, :1], xs[sys.n_s:, :1], us[:, :1])[:, 0])
        return rows

    # -- evaluation --------------------------------------------------------

    def values(self, w):
        key = w.tobytes()
        if self._value_cache[0] == key:
            return self._value_cache[1]
        if self._deriv_cache[0] == key:
            return self._deriv_cache[1][:2]
        xs, us = self.layout.split(w)
        last, q, _ = self._integrate(xs, us, perturb=False)
        out = (float(np.sum(q)), self._constraints(xs, us, last))
        self._value_cache = (key, out)
        return out

    def _constraints(self, xs, us, last):
        p, sys = self.p, self.sys
        rows = self._initial_rows(xs, us)
        if p.formulation == "lifted":
            rows.append(self.node_residual(xs, us).T.reshape(-1))
        n_match = last.shape[0]
        rows.append((last - xs[:n_match, 1:]).T.reshape(-1))
        return np.concatenate(rows)

    def derivatives(self, w):
        key = w.tobytes()
        if self._deriv_cache[0] == key:
            return self._deriv_cache[1]
        p, sys, lay = self.p, self.sys, self.layout
        N = p.N
        xs, us = lay.split(w)
        last_all, q_all, steps = self._integrate(xs, us, perturb=True)
        last, q = last_all[:, :N], q_all[:N]
        f = float(np.sum(q))
        c = self._constraints(xs, us, last)
        n = lay.size
        grad = np.zeros(n)
        jac = np.zeros((len(c), n))
        n_start = self.n_perturb
        n_match = last.shape[0]
        # leading rows: initial conditions (and node residuals for lifted)
        row = 0
        jac[np.arange(sys.n_s), lay.x_index(0)[: sys.n_s]] = 1.0
        row = sys.n_s
        if p.formulation == "full":
            if p.zf0_policy == "given":
                jac[row + np.arange(sys.n_f), lay.x_index(0)[sys.n_s:]] = 1.0
            else:
                blk = self._fast_rows_jac(xs[:, :1], us[:, :1])[:, :, 0]
                cols = np.concatenate([lay.x_index(0), lay.u_index(0)])
                jac[row:row + sys.n_f, cols] = blk
            row += sys.n_f
        if p.formulation == "lifted":
            ucols = self._node_controls(us)
            blk = self._residual_jac(xs, ucols)  # (n_f, n + n_u, N+1)
            for k in range(N + 1):
                cols = np.concatenate([lay.x_index(k), lay.u_index(min(k, N - 1))])
                r_rows = slice(row + k * sys.n_f, row + (k + 1) * sys.n_f)
                # node N shares u_{N-1}; accumulate to handle the shared column
                jac[r_rows, cols] += blk[:, :, k]
            row += (N + 1) * sys.n_f
        match_row0 = row
        # matching rows and objective gradient from the FD copies
        for j, h in enumerate(steps):
            plus = slice((1 + 2 * j) * N, (2 + 2 * j) * N)
            minus = slice((2 + 2 * j) * N, (3 + 2 * j) * N)
            d_last = (last_all[:, plus] - last_all[:, minus]) / (2.0 * h)  # (n_match, N)
            d_q = (q_all[plus] - q_all[minus]) / (2.0 * h)
            for k in range(N):
                col = lay.x_index(k)[j] if j < n_start else lay.u_index(k)[j - n_start]
                jac[match_row0 + k * n_match: match_row0 + (k + 1) * n_match, col] = d_last[:, k]
                grad[col] += d_q[k]
        for k in range(N):
            r0 = match_row0 + k * n_match
            jac[r0 + np.arange(n_match), lay.x_index(k + 1)[:n_match]] = -1.0
        out = (f, c, grad, jac)
        self._deriv_cache = (key, out)
        return out

    def _fast_rows_jac(self, xs, us):
        sys = self.sys
        z = np.concatenate([xs, us], axis=0)

        def ff(y):
            return sys.fast(y[: sys.n_s], y[sys.n_s:sys.n], y[sys.n:])

        return fd_jacobian(ff, z, self.p.derivatives.fd_step)

    def _residual_jac(self, xs, ucols):
        sys, p = self.sys, self.p
        z = np.concatenate([xs, ucols], axis=0)

        def r(y):
            return manifold_residual(sys, y[: sys.n_s], y[sys.n_s:sys.n], y[sys.n:],
                                     p.manifold, p.derivatives)

        return fd_jacobian(r, z, self._r_rel)


# ---------------------------------------------------------------------------
# public API


def _bounds(p: OcpProblem, lay: Layout):
    lb = np.full(lay.size, -np.inf)
    ub = np.full(lay.size, np.inf)
    for k in range(p.N):
        lb[lay.u_index(k)] = p.sys.u_lower
        ub[lay.u_index(k)] = p.sys.u_upper
    return lb, ub


def _initial_fast(p: OcpProblem, u) -> np.ndarray:
    if p.zf0_policy == "given":
        return p.zf0
    from .manifold import solve_batch

    zf, _ = solve_batch(p.sys, p.zs0[:, None], np.asarray(u, float)[:, None], ManifoldSpec(),
                        None, p.derivatives)
    return zf[:, 0]


def _forward_guess(p: OcpProblem, lay: Layout, us: np.ndarray) -> np.ndarray:
    """Node states from a sequential forward simulation under controls ``us``."""
    sys = p.sys
    iv = _Intervals(p)
    xs = np.empty((lay.nx, p.N + 1))
    if p.formulation == "reduced":
        xs[:, 0] = p.zs0
    else:
        xs[:, 0] = np.concatenate([p.zs0, _initial_fast(p, us[:, 0])])
    fast = None
    for k in range(p.N):
        if p.formulation == "full":
            _, zs, zf, _ = iv.run(xs[:, k:k + 1], us[:, k:k + 1])
            xs[:, k + 1] = np.concatenate([zs[-1, :, 0], zf[-1, :, 0]])
        else:
            guess = xs[sys.n_s:, k:k + 1] if p.formulation == "lifted" else fast
            _, zs, zf, _ = iv.run(xs[: sys.n_s, k:k + 1], us[:, k:k + 1], guess, dense=True)
            fast = zf[-1]
            xs[: sys.n_s, k + 1] = zs[-1, :, 0]
            if p.formulation == "lifted":
                xs[sys.n_s:, k + 1] = zf[-1, :, 0]
    if p.formulation == "lifted":
        # the last node uses u_{N-1}, interior nodes u_k: re-project onto the manifold
        from .manifold import solve_batch

        zf, _ = solve_batch(sys, xs[: sys.n_s], np.concatenate([us, us[:, -1:]], axis=1),
                            p.manifold, xs[sys.n_s:], p.derivatives)
        xs[sys.n_s:] = zf
    return lay.join(xs, us)


def _controls_from(init, p: OcpProblem) -> np.ndarray:
    sys = p.sys
    if init is None or (isinstance(init, str) and init == "midpoint"):
        mid = np.where(np.isfinite(sys.u_lower) & np.isfinite(sys.u_upper),
                       0.5 * (sys.u_lower + sys.u_upper), 0.0)
        return np.repeat(np.clip(mid, sys.u_lower, sys.u_upper)[:, None], p.N, axis=1)
    if isinstance(init, str) and init == "zero":
        return np.repeat(np.clip(np.zeros(sys.n_u), sys.u_lower, sys.u_upper)[:, None], p.N, axis=1)
    raise ContractError(f"unknown initial guess {init!r}; use 'midpoint', 'zero' or a solution")


def initial_guess(p: OcpProblem, init=None) -> np.ndarray:
    """Decision vector for ``init`` (``"midpoint"``, ``"zero"``, an OcpSolution or a vector)."""
    lay = Layout(p.N, p.nx, p.sys.n_u)
    if isinstance(init, OcpSolution):
        traj = init.trajectory
        nodes = traj.select(p.node_times())
        xs = nodes.z_s.T if p.formulation == "reduced" else np.concatenate([nodes.z_s, nodes.z_f], 1).T
        us = nodes.u[:-1].T
        return lay.join(xs, np.clip(us, p.sys.u_lower[:, None], p.sys.u_upper[:, None]))
    if isinstance(init, np.ndarray):
        if init.shape != (lay.size,):
            raise ContractError(f"initial vector must have length {lay.size}")
        return init.astype(float)
    return _forward_guess(p, lay, _controls_from(init, p))


def transcribe(p: OcpProblem, init=None) -> NlpProblem:
    """Lower ``p`` to an :class:`NlpProblem` (derivatives by in-batch differences)."""
    sh = _Shooting(p)
    lb, ub = _bounds(p, sh.layout)
    x0 = initial_guess(p, init)
    prob = NlpProblem(
        n=sh.layout.size,
        objective=lambda w: sh.values(w)[0],
        x0=x0,
        gradient=lambda w: sh.derivatives(w)[2],
        constraints=lambda w: sh.values(w)[1],
        jacobian=lambda w: sh.derivatives(w)[3],
        lb=lb,
        ub=ub,
    )
    prob.shooting = sh  # keeps the evaluator reachable for diagnostics
    return prob


def reconstruct(p: OcpProblem, w: np.ndarray):
    """Re-integrate every interval from its node.

    Returns the chained trajectory, the interval end states ``(n, N)``, the
    integrator statistics and the per-interval cost integrals.
    """
    sys = p.sys
    lay = Layout(p.N, p.nx, sys.n_u)
    xs, us = lay.split(w)
    iv = _Intervals(p)
    nodes = p.node_times()
    samples = p.sample_times()
    offsets = []
    for k in range(p.N):
        inside = samples[(samples > nodes[k]) & (samples < nodes[k + 1])] - nodes[k]
        offsets.extend(inside.tolist())
    t_eval = np.unique(np.round(offsets, 13)) if offsets else None
    if p.formulation == "reduced":
        starts, guess = xs, None
    elif p.formulation == "lifted":
        starts, guess = xs[: sys.n_s, : p.N], xs[sys.n_s:, : p.N]
    else:
        starts, guess = xs[:, : p.N], None
    if p.formulation == "reduced":
        starts = starts[:, : p.N]
    times, zs, zf, cost = iv.run(starts, us, guess, t_eval, dense=True)
    t_all, s_all, f_all, u_all = [], [], [], []
    for k in range(p.N):
        tk = nodes[k] + times
        tk[-1] = nodes[k + 1]
        keep = slice(0, len(times) - 1) if k < p.N - 1 else slice(0, len(times))
        t_all.append(tk[keep])
        s_all.append(zs[keep, :, k])
        f_all.append(zf[keep, :, k])
        u_all.append(np.repeat(us[:, k][None, :], len(tk[keep]), axis=0))
    t = np.concatenate(t_all)
    traj = Trajectory(t, np.concatenate(s_all), np.concatenate(f_all),
                      np.concatenate(u_all), iv.stats)
    ends = np.concatenate([zs[-1], zf[-1]], axis=0)
    return traj, ends, iv.stats, cost


def trajectory_cost(p: OcpProblem, traj: Trajectory, ends: Optional[np.ndarray] = None) -> float:
    """Trapezoid quadrature of the running cost along a reconstructed trajectory.

    Interval ends (``ends``, shape ``(n, N)``) close each interval so the
    quadrature does not straddle control switches.
    """
    nodes = p.node_times()
    total = 0.0
    for k in range(p.N):
        sel = (traj.times >= nodes[k] - 1e-12) & (traj.times < nodes[k + 1] - 1e-12)
        t = traj.times[sel]
        zs, zf, u = traj.z_s[sel].T, traj.z_f[sel].T, traj.u[sel].T
        if ends is not None:
            t = np.append(t, nodes[k + 1])
            zs = np.concatenate([zs, ends[: p.sys.n_s, k:k + 1]], axis=1)
            zf = np.concatenate([zf, ends[p.sys.n_s:, k:k + 1]], axis=1)
            u = np.concatenate([u, u[:, -1:]], axis=1)
        vals = np.asarray(p.running_cost(zs, zf, u), dtype=float).reshape(-1)
        total += float(_trapezoid(t, vals[:, None])[0])
    return total


def solve_ocp(p: OcpProblem, init=None, raise_on_failure: bool = True) -> OcpSolution:
    """Transcribe, solve and reconstruct; raises NlpFailure tagged with the formulation."""
    timings = {}
    t0 = time.perf_counter()
    prob = transcribe(p, init)
    sh = prob.shooting
    timings["transcription"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    res = solve(prob, p.nlp)
    timings["nlp"] = time.perf_counter() - t0
    if not res.converged and raise_on_failure:
        raise NlpFailure(f"{p.formulation} formulation did not converge ({res.status})",
                         result=res, phase=p.formulation)
    t0 = time.perf_counter()
    traj, ends, rstats, costs = reconstruct(p, res.x_star)
    samples = traj.select(p.sample_times())
    if p.quadrature == "state":
        objective = float(np.sum(costs))
    else:
        objective = trajectory_cost(p, traj, ends)
    timings["reconstruction"] = time.perf_counter() - t0
    timings["total"] = timings["transcription"] + timings["nlp"] + timings["reconstruction"]
    stats = IntegratorStats().add(sh.intervals.stats).add(rstats)
    node_res = None
    if p.formulation == "lifted":
        xs, us = sh.layout.split(res.x_star)
        node_res = sh.node_residual(xs, us)
    return OcpSolution(p.formulation, traj, samples, objective, res, res.x_star, timings,
                       stats, node_res, sh.evaluations)


# ---------------------------------------------------------------------------
# comparison


def _inf(a: np.ndarray) -> float:
    return float(np.max(np.abs(a), initial=0.0))


def compare_solutions(a: OcpSolution, b: OcpSolution) -> dict:
    sa, sb = a.samples, b.samples
    d = {
        "zs_inf": _inf(sa.z_s - sb.z_s),
        "zf_inf": _inf(sa.z_f - sb.z_f),
        "u_inf": _inf(sa.u - sb.u),
    }
    d["zs_rel"] = d["zs_inf"] / max(_inf(sa.z_s), 1e-300)
    d["objective_rel"] = abs(a.objective - b.objective) / max(abs(a.objective), 1e-300)
    d["argmax"] = max(("zs_inf", "zf_inf", "u_inf"), key=lambda k: d[k])
    return d


def compare_formulations(p_base: OcpProblem, formulations, init=None,
                         manifold: Optional[ManifoldSpec] = None) -> dict:
    """Solve each formulation and report pairwise differences on the sample grid.

    Failures do not abort the comparison; they are reported under
    ``"failures"`` and excluded from the pairwise tables.
    """
    solutions, failures = {}, {}
    order = []
    for i, form in enumerate(formulations):
        tag = form if form not in order else f"{form}#{i}"
        order.append(tag)
        try:
            solutions[tag] = solve_ocp(p_base.with_formulation(form, manifold), init)
        except (NlpFailure, TranscriptionError, ManifoldError, IntegrationError,
                EvaluationError) as exc:
            failures[tag] = f"{type(exc).__name__}: {exc}"
    pairs = {}
    for i, a in enumerate(order):
        for b in order[i + 1:]:
            if a in solutions and b in solutions:
                pairs[f"{a}/{b}"] = compare_solutions(solutions[a], solutions[b])
    ratios = {}
    if "full" in solutions:
        for other in ("lifted", "reduced"):
            if other in solutions:
                ratios[f"full/{other}"] = (solutions["full"].wall_time_seconds["total"]
                                           / solutions[other].wall_time_seconds["total"])
    return {"solutions": solutions, "pairs": pairs, "wall_time_ratios": ratios,
            "failures": failures, "order": order}
