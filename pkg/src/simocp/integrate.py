"""Time integrators: Dormand-Prince 5(4), two-stage Radau IIA, manifold-embedded.

The cores (:func:`run_dp54`, :func:`run_radau2a`) advance a batch of
states ``y`` of shape ``(n, B)`` with one shared step sequence. Multiple
shooting uses this to integrate all intervals and all finite-difference
copies together, so difference quotients see identical discretisations.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .calculus import DEFAULT as DEFAULT_DERIV
from .calculus import DerivativeConfig, flow_jacobian_batch
from .errors import ContractError, EvaluationError, ImplicitSolveError, StepSizeError
from .model import PartitionedState, SpSystem

METHODS = ("dp54", "radau2a", "manifold-embedded")


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "dp54"
    abs_tol: float = 1e-8
    rel_tol: float = 1e-6
    h_init: Optional[float] = None
    h_min: float = 1e-14
    h_max: float = np.inf
    newton_tol: float = 1e-10
    newton_max_iters: int = 20
    fixed_step: Optional[float] = None
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown integrator {self.method!r}; choose from {METHODS}")
        if not (self.abs_tol > 0 and self.rel_tol > 0 and self.newton_tol > 0):
            raise ContractError("tolerances must be positive")
        if not 0 < self.h_min <= self.h_max:
            raise ContractError("need 0 < h_min <= h_max")
        if self.h_init is not None and not self.h_min <= self.h_init <= self.h_max:
            raise ContractError("need h_min <= h_init <= h_max")
        if self.fixed_step is not None and not self.fixed_step > 0:
            raise ContractError("fixed_step must be positive")


@dataclass
class IntegratorStats:
    steps: int = 0
    rejected: int = 0
    newton_iters: int = 0
    rhs_evals: int = 0
    jac_evals: int = 0
    implicit_steps: int = 0

    def add(self, other: "IntegratorStats") -> "IntegratorStats":
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous piecewise-constant control on ``breakpoints``."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if bp.ndim != 1 or len(bp) != len(vals) + 1 or np.any(np.diff(bp) <= 0):
            raise ContractError("need strictly increasing breakpoints, one more than values")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, u, t0: float, t1: float) -> "PiecewiseConstant":
        return cls(np.array([t0, t1 if t1 > t0 else t0 + 1.0]), np.atleast_1d(u)[None, :])

    def index(self, t) -> np.ndarray:
        k = np.searchsorted(self.breakpoints, t, side="right") - 1
        return np.clip(k, 0, len(self.values) - 1)

    def __call__(self, t) -> np.ndarray:
        return self.values[self.index(t)]


@dataclass
class Trajectory:
    times: np.ndarray
    z_s: np.ndarray  # (K, n_s)
    z_f: np.ndarray  # (K, n_f)
    u: np.ndarray  # (K, n_u), control active at each time
    stats: IntegratorStats = field(default_factory=IntegratorStats)

    def __post_init__(self):
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ContractError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def states(self) -> list[PartitionedState]:
        return [PartitionedState(a, b) for a, b in zip(self.z_s, self.z_f)]

    def select(self, times) -> "Trajectory":
        """Rows at the given times (which must be present up to 1e-12)."""
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.times, times - 1e-12 * max(1.0, abs(self.times[-1])))
        idx = np.clip(idx, 0, len(self.times) - 1)
        if np.any(np.abs(self.times[idx] - times) > 1e-9 * max(1.0, abs(self.times[-1]))):
            raise ContractError("requested times are not output points of this trajectory")
        return Trajectory(self.times[idx], self.z_s[idx], self.z_f[idx], self.u[idx], self.stats)


@dataclass
class BatchResult:
    times: np.ndarray  # (K,)
    states: np.ndarray  # (K, n, B)
    stats: IntegratorStats


BatchRhs = Callable[[float, np.ndarray], np.ndarray]


def _err_norm(err, y0, y1, cfg) -> float:
    sc = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y0), np.abs(y1))
    per_col = np.sqrt(np.mean((err / sc) ** 2, axis=0))
    return float(np.max(per_col)) if per_col.size else 0.0


def _checked(f, t, y, stats):
    out = f(t, y)
    stats.rhs_evals += 1
    if not np.all(np.isfinite(out)):
        rows = np.isfinite(out).reshape(out.shape[0], -1).all(axis=1)
        bad = int(np.flatnonzero(~rows)[0])
        raise EvaluationError(f"non-finite right-hand side in component {bad} at t={t}", index=bad)
    return out


def _grid(t0, t1, t_eval):
    stops = [t1]
    if t_eval is not None:
        te = np.asarray(t_eval, dtype=float)
        stops = sorted(set(float(x) for x in te if t0 < x < t1) | {t1})
    return stops


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _initial_step(f, t0, y0, f0, order, cfg, stats, span):
    sc = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = _checked(f, t0 + h0, y0 + h0 * f0, stats)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1, cfg.h_max, span)


def _dp54_step(f, t, y, k1, h, stats):
    ks = [k1]
    for i in range(1, 7):
        yi = y + h * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
        ks.append(_checked(f, t + _C[i] * h, yi, stats))
    y_new = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
    err = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    return y_new, err, ks[6]


def run_dp54(f: BatchRhs, y0: np.ndarray, t0: float, t1: float,
             cfg: IntegratorConfig, t_eval: Sequence[float] | None = None) -> BatchResult:
    """Adaptive (or fixed-step) Dormand-Prince 5(4) on a batch."""
    stats = IntegratorStats()
    y = np.array(y0, dtype=float)
    times, states = [t0], [y.copy()]
    if t1 <= t0:
        return BatchResult(np.array(times), np.array(states), stats)
    k1 = _checked(f, t0, y, stats)
    t = t0
    if cfg.fixed_step is not None:
        n = max(1, int(np.ceil((t1 - t0) / cfg.fixed_step - 1e-10)))
        h = (t1 - t0) / n
        for i in range(n):
            y, _, k1 = _dp54_step(f, t, y, k1, h, stats)
            t = t0 + (i + 1) * h
            stats.steps += 1
            times.append(t)
            states.append(y.copy())
        return BatchResult(np.array(times), np.array(states), stats)
    h = cfg.h_init or _initial_step(f, t0, y, k1, 5, cfg, stats, t1 - t0)
    for stop in _grid(t0, t1, t_eval):
        while t < stop:
            if stats.steps + stats.rejected >= cfg.max_steps:
                raise StepSizeError(f"step budget {cfg.max_steps} exhausted at t={t}")
            h_try = min(h, stop - t)
            last = stop - t - h_try <= 1e-12 * max(1.0, abs(stop))
            if last:
                h_try = stop - t
            y_new, err, k7 = _dp54_step(f, t, y, k1, h_try, stats)
            en = _err_norm(err, y, y_new, cfg)
            if en <= 1.0:
                t = stop if last else t + h_try
                y, k1 = y_new, k7
                stats.steps += 1
                times.append(t)
                states.append(y.copy())
                fac = 5.0 if en == 0 else min(5.0, max(0.2, 0.9 * en ** -0.2))
                if not last or h_try >= h:
                    h = min(cfg.h_max, h_try * fac)
            else:
                stats.rejected += 1
                h = h_try * max(0.2, 0.9 * en ** -0.2)
                if h < cfg.h_min:
                    raise StepSizeError(f"step size {h:.3e} below h_min at t={t}")
    return BatchResult(np.array(times), np.array(states), stats)


# two-stage Radau IIA, order 3
RADAU_A = np.array([[5 / 12, -1 / 12], [3 / 4, 1 / 4]])
RADAU_C = np.array([1 / 3, 1.0])


def _radau_stage_solve(f, jac, t, y, h, cfg, stats):
    """Solve the stage equations; returns ``y_{n+1}`` or raises ImplicitSolveError."""
    n, b = y.shape
    eye = np.eye(2 * n)

    def newton_matrix(jmat):
        jt = np.moveaxis(jmat, -1, 0)  # (B, n, n)
        m = np.empty((b, 2 * n, 2 * n))
        for i in range(2):
            for j in range(2):
                m[:, i * n:(i + 1) * n, j * n:(j + 1) * n] = -h * RADAU_A[i, j] * jt
        m += eye
        try:
            return np.linalg.inv(m)
        except np.linalg.LinAlgError:
            raise ImplicitSolveError("singular Newton matrix", []) from None

    minv = newton_matrix(jac(t, y))
    stats.jac_evals += 1
    z = np.zeros((2 * n, b))
    trace: list[float] = []
    prev = None
    refreshed = False
    scale = 1.0 + np.max(np.abs(y), axis=0)
    for it in range(cfg.newton_max_iters):
        stage_t = t + RADAU_C * h
        f1 = _checked(f, stage_t[0], y + z[:n], stats)
        f2 = _checked(f, stage_t[1], y + z[n:], stats)
        g = z - h * np.concatenate([RADAU_A[0, 0] * f1 + RADAU_A[0, 1] * f2,
                                    RADAU_A[1, 0] * f1 + RADAU_A[1, 1] * f2])
        dz = -np.einsum("bij,jb->ib", minv, g)
        z = z + dz
        stats.newton_iters += 1
        dn = float(np.max(np.max(np.abs(dz), axis=0) / scale))
        trace.append(dn)
        if not np.isfinite(dn):
            break
        if dn <= cfg.newton_tol:
            return y + z[n:]
        if prev is not None and dn > 0.5 * prev:
            if dn > prev and refreshed:
                break
            if not refreshed:
                minv = newton_matrix(jac(t + h, y + z[n:]))
                stats.jac_evals += 1
                refreshed = True
        prev = dn
    raise ImplicitSolveError(f"Newton did not converge at t={t}, h={h:.3e}", trace)


def run_radau2a(f: BatchRhs, jac: Callable[[float, np.ndarray], np.ndarray],
                y0: np.ndarray, t0: float, t1: float, cfg: IntegratorConfig,
                t_eval: Sequence[float] | None = None) -> BatchResult:
    """Two-stage Radau IIA with step-halving error estimation on a batch."""
    stats = IntegratorStats()
    y = np.array(y0, dtype=float)
    times, states = [t0], [y.copy()]
    if t1 <= t0:
        return BatchResult(np.array(times), np.array(states), stats)
    t = t0
    if cfg.fixed_step is not None:
        n = max(1, int(np.ceil((t1 - t0) / cfg.fixed_step - 1e-10)))
        h = (t1 - t0) / n
        for i in range(n):
            y = _radau_stage_solve(f, jac, t, y, h, cfg, stats)
            t = t0 + (i + 1) * h
            stats.steps += 1
            stats.implicit_steps += 1
            times.append(t)
            states.append(y.copy())
        return BatchResult(np.array(times), np.array(states), stats)
    if cfg.h_init is not None:
        h = cfg.h_init
    else:
        f0 = _checked(f, t0, y, stats)
        h = _initial_step(f, t0, y, f0, 3, cfg, stats, t1 - t0)
    for stop in _grid(t0, t1, t_eval):
        while t < stop:
            if stats.steps + stats.rejected >= cfg.max_steps:
                raise StepSizeError(f"step budget {cfg.max_steps} exhausted at t={t}")
            h_try = min(h, stop - t)
            last = stop - t - h_try <= 1e-12 * max(1.0, abs(stop))
            if last:
                h_try = stop - t
            try:
                y_full = _radau_stage_solve(f, jac, t, y, h_try, cfg, stats)
                y_mid = _radau_stage_solve(f, jac, t, y, 0.5 * h_try, cfg, stats)
                y_half = _radau_stage_solve(f, jac, t + 0.5 * h_try, y_mid, 0.5 * h_try, cfg, stats)
            except ImplicitSolveError:
                stats.rejected += 1
                h = 0.25 * h_try
                if h < cfg.h_min:
                    raise
                continue
            en = _err_norm((y_half - y_full) / 7.0, y, y_half, cfg)
            if en <= 1.0:
                t = stop if last else t + h_try
                y = y_half
                stats.steps += 1
                stats.implicit_steps += 1
                times.append(t)
                states.append(y.copy())
                fac = 4.0 if en == 0 else min(4.0, max(0.2, 0.9 * en ** -0.25))
                if not last or h_try >= h:
                    h = min(cfg.h_max, h_try * fac)
            else:
                stats.rejected += 1
                h = h_try * max(0.2, 0.9 * en ** -0.25)
                if h < cfg.h_min:
                    raise StepSizeError(f"step size {h:.3e} below h_min at t={t}")
    return BatchResult(np.array(times), np.array(states), stats)


def system_rhs(sys: SpSystem, u: np.ndarray) -> BatchRhs:
    """Batched flow ``(f_s, f_f / eps)`` under a frozen control."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]

    def f(t, y):
        return sys.flow(y, u)

    return f


def system_jac(sys: SpSystem, u: np.ndarray, dcfg: DerivativeConfig = DEFAULT_DERIV):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]

    def jac(t, y):
        uu = u if u.shape[1] == y.shape[1] else np.broadcast_to(u[:, :1], (u.shape[0], y.shape[1]))
        return flow_jacobian_batch(sys, y, uu, dcfg)

    return jac


def run_system(sys: SpSystem, y0: np.ndarray, u: np.ndarray, t0: float, t1: float,
               cfg: IntegratorConfig, t_eval=None,
               dcfg: DerivativeConfig = DEFAULT_DERIV) -> BatchResult:
    """Integrate the full system (batched) with a frozen control per column."""
    f = system_rhs(sys, u)
    if cfg.method == "radau2a":
        return run_radau2a(f, system_jac(sys, u, dcfg), y0, t0, t1, cfg, t_eval)
    if cfg.method == "dp54":
        return run_dp54(f, y0, t0, t1, cfg, t_eval)
    raise ContractError("manifold-embedded integration needs integrate_on_manifold")


def _as_control(sys, u_of_t, t0, t1) -> PiecewiseConstant:
    if isinstance(u_of_t, PiecewiseConstant):
        return u_of_t
    u = np.zeros(sys.n_u) if u_of_t is None else np.atleast_1d(np.asarray(u_of_t, dtype=float))
    return PiecewiseConstant.constant(u, t0, t1)


def _pieces(ctrl: PiecewiseConstant, t0: float, t1: float):
    cuts = [t0] + [b for b in ctrl.breakpoints if t0 < b < t1] + [t1]
    for a, b in zip(cuts[:-1], cuts[1:]):
        yield a, b, ctrl.values[ctrl.index(a)]


def _check_controls(sys: SpSystem, ctrl: PiecewiseConstant):
    vals = ctrl.values
    if vals.shape[1] != sys.n_u:
        raise ContractError(f"control has {vals.shape[1]} components, expected {sys.n_u}")
    if np.any(vals < sys.u_lower) or np.any(vals > sys.u_upper):
        raise ContractError("control values outside [u_lower, u_upper]")


def _assemble(sys, pieces_out, ctrl, t_eval, stats) -> Trajectory:
    ts, ys = [], []
    for res in pieces_out:
        for t, y in zip(res.times, res.states):
            if ts and t <= ts[-1]:
                continue
            ts.append(t)
            ys.append(y[:, 0])
    times = np.array(ts)
    states = np.array(ys).reshape(len(ts), -1)
    traj = Trajectory(times, states[:, : sys.n_s], states[:, sys.n_s:],
                      ctrl(times).reshape(len(ts), sys.n_u), stats)
    if t_eval is not None:
        traj = traj.select(t_eval)
    return traj


def integrate(sys: SpSystem, z0: PartitionedState, u_of_t=None, t_span=(0.0, 1.0),
              cfg: IntegratorConfig = IntegratorConfig(), t_eval=None,
              dcfg: DerivativeConfig = DEFAULT_DERIV) -> Trajectory:
    """Integrate the full system from ``z0`` under a piecewise-constant control.

    Without ``t_eval`` every accepted step endpoint is returned; with it,
    exactly the requested times (which become step boundaries).
    """
    z0.check(sys)
    t0, t1 = map(float, t_span)
    if t1 < t0:
        raise ContractError("t_span must be increasing")
    y0 = z0.vector
    if not np.all(np.isfinite(y0)):
        raise ContractError("initial state must be finite")
    ctrl = _as_control(sys, u_of_t, t0, t1)
    _check_controls(sys, ctrl)
    stats = IntegratorStats()
    outs = []
    if t1 == t0:
        outs.append(BatchResult(np.array([t0]), y0[None, :, None], stats))
    y = y0[:, None]
    for a, b, u in _pieces(ctrl, t0, t1):
        res = run_system(sys, y, u, a, b, cfg, t_eval, dcfg)
        stats.add(res.stats)
        outs.append(res)
        y = res.states[-1]
    return _assemble(sys, outs, ctrl, t_eval, stats)


def integrate_on_manifold(sys: SpSystem, zs0, u_of_t=None, t_span=(0.0, 1.0), manifold=None,
                          cfg: IntegratorConfig = IntegratorConfig(), t_eval=None,
                          dcfg: DerivativeConfig = DEFAULT_DERIV) -> Trajectory:
    """Reduced dynamics ``dz_s/dt = f_s(z_s, h(z_s, u), u)`` with embedded manifold solves.

    Uses Dormand-Prince on the slow state only; ``h`` is recomputed by a
    warm-started manifold solve at every right-hand-side evaluation.
    """
    from .manifold import ManifoldSpec, ManifoldTracker

    manifold = manifold or ManifoldSpec()
    zs0 = np.atleast_1d(np.asarray(zs0, dtype=float))
    if zs0.shape != (sys.n_s,):
        raise ContractError(f"zs0 must have shape ({sys.n_s},)")
    t0, t1 = map(float, t_span)
    ctrl = _as_control(sys, u_of_t, t0, t1)
    _check_controls(sys, ctrl)
    dp = dataclasses.replace(cfg, method="dp54")
    stats = IntegratorStats()
    outs = []
    ys = zs0[:, None]
    tracker = None
    for a, b, u in _pieces(ctrl, t0, t1):
        u2 = u[:, None]
        if tracker is None:
            tracker = ManifoldTracker(sys, manifold, dcfg)
            tracker.start(ys, u2, t=a)
        res = run_dp54(tracker.reduced_rhs(u2), ys, a, b, dp, t_eval)
        stats.add(res.stats)
        # fast parts at the stored slow states, solved along the path
        zf = tracker.along(res.times, res.states, u2)
        outs.append(BatchResult(res.times, np.concatenate([res.states, zf], axis=1), res.stats))
        ys = res.states[-1]
        tracker.fast = zf[-1]
    return _assemble(sys, outs, ctrl, t_eval, stats)
