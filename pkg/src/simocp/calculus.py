"""Jacobians, fast-residual time derivatives and second time derivatives.

All internal routines work on batched arrays with the batch on the trailing
axis so that integrators and manifold solvers can evaluate many states in
one call. The public functions take a single :class:`PartitionedState`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EvaluationError, UnsupportedOrderError
from .model import PartitionedState, SpSystem, as_control, check_finite

EPS_MACH = np.finfo(float).eps


@dataclass(frozen=True)
class DerivativeConfig:
    """How derivatives are obtained.

    ``mode`` is ``"analytic"`` (use the system's registered Jacobian when
    present, otherwise fall back to differences) or ``"fd"`` (always central
    differences). ``scaling="epsilon"`` returns fast-time quantities, i.e.
    ``eps**m * g_m`` and ``eps**2 * zddot``.
    """

    mode: str = "analytic"
    fd_step: float = 1e-6
    scaling: str = "raw"
    m_max: int = 3

    def __post_init__(self):
        if self.mode not in ("analytic", "fd"):
            raise ContractError(f"unknown derivative mode {self.mode!r}")
        if self.scaling not in ("raw", "epsilon"):
            raise ContractError(f"unknown scaling {self.scaling!r}")
        if not self.fd_step > 0:
            raise ContractError("fd_step must be positive")
        if self.m_max < 0:
            raise ContractError("m_max must be non-negative")

    def uses_analytic(self, sys: SpSystem) -> bool:
        return self.mode == "analytic" and sys.jac is not None


DEFAULT = DerivativeConfig()


@dataclass(frozen=True)
class JacobianBlock:
    d_fs_dzs: np.ndarray
    d_fs_dzf: np.ndarray
    d_ff_dzs: np.ndarray
    d_ff_dzf: np.ndarray
    d_fs_du: np.ndarray
    d_ff_du: np.ndarray

    def flow_jacobian(self, epsilon: float) -> np.ndarray:
        """Jacobian of ``(f_s, f_f / eps)`` with respect to ``(z_s, z_f)``."""
        top = np.concatenate([self.d_fs_dzs, self.d_fs_dzf], axis=1)
        bottom = np.concatenate([self.d_ff_dzs, self.d_ff_dzf], axis=1) / epsilon
        return np.concatenate([top, bottom], axis=0)

    def flow_control_jacobian(self, epsilon: float) -> np.ndarray:
        return np.concatenate([self.d_fs_du, self.d_ff_du / epsilon], axis=0)


def _steps(x: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(x))


def fd_jacobian(fun, x: np.ndarray, rel: float) -> np.ndarray:
    """Central-difference Jacobian of a batched function.

    ``fun`` maps ``(n, B)`` to ``(p, B)``; the result has shape ``(p, n, B)``.
    All ``2 n`` probes are evaluated in a single batched call.
    """
    n, b = x.shape
    h = _steps(x, rel)  # (n, B)
    probes = np.repeat(x[:, None, :], 2 * n, axis=1)  # (n, 2n, B)
    idx = np.arange(n)
    probes[idx, 2 * idx, :] += h
    probes[idx, 2 * idx + 1, :] -= h
    vals = fun(probes.reshape(n, 2 * n * b)).reshape(-1, 2 * n, b)
    return (vals[:, 0::2, :] - vals[:, 1::2, :]) / (2.0 * h[None, :, :])


def _jacobian_batch(sys: SpSystem, zs, zf, u, cfg: DerivativeConfig) -> JacobianBlock:
    b = zs.shape[1]
    if cfg.uses_analytic(sys):
        blocks = [np.broadcast_to(np.asarray(m, dtype=float), shape + (b,))
                  for m, shape in zip(sys.jac(zs, zf, u),
                                      [(sys.n_s, sys.n_s), (sys.n_s, sys.n_f), (sys.n_s, sys.n_u),
                                       (sys.n_f, sys.n_s), (sys.n_f, sys.n_f), (sys.n_f, sys.n_u)])]
        dss, dsf, dsu, dfs, dff, dfu = blocks
    else:
        ns, nf = sys.n_s, sys.n_f

        def both(x):
            a, c, w = x[:ns], x[ns:ns + nf], x[ns + nf:]
            return np.concatenate([sys.slow(a, c, w), sys.fast(a, c, w)])

        full = fd_jacobian(both, np.concatenate([zs, zf, u]), cfg.fd_step)
        dss, dsf, dsu = full[:ns, :ns], full[:ns, ns:ns + nf], full[:ns, ns + nf:]
        dfs, dff, dfu = full[ns:, :ns], full[ns:, ns:ns + nf], full[ns:, ns + nf:]
    jb = JacobianBlock(dss, dsf, dfs, dff, dsu, dfu)
    for name in ("d_fs_dzs", "d_fs_dzf", "d_ff_dzs", "d_ff_dzf", "d_fs_du", "d_ff_du"):
        if not np.all(np.isfinite(getattr(jb, name))):
            raise EvaluationError(f"non-finite Jacobian block {name}")
    return jb


def flow_jacobian_batch(sys: SpSystem, z, u, cfg: DerivativeConfig = DEFAULT) -> np.ndarray:
    """Batched ``(n, n, B)`` Jacobian of the full flow at stacked states."""
    jb = _jacobian_batch(sys, z[: sys.n_s], z[sys.n_s:], u, cfg)
    return jb.flow_jacobian(sys.epsilon)


def jacobian(sys: SpSystem, state: PartitionedState, u=None,
             cfg: DerivativeConfig = DEFAULT) -> JacobianBlock:
    """Partial derivative blocks of ``f_s`` and ``f_f`` at one state."""
    state.check(sys)
    u = as_control(sys, u)
    check_finite(np.concatenate([state.z_s, state.z_f]), "state")
    jb = _jacobian_batch(sys, state.z_s[:, None], state.z_f[:, None], u[:, None], cfg)
    return JacobianBlock(*(getattr(jb, f)[..., 0] for f in
                           ("d_fs_dzs", "d_fs_dzf", "d_ff_dzs", "d_ff_dzf", "d_fs_du", "d_ff_du")))


def nested_step(levels: int, cfg: DerivativeConfig) -> float:
    """Relative difference step for ``levels`` nested central differences."""
    if levels <= 1:
        return cfg.fd_step
    return EPS_MACH ** (1.0 / (levels + 2))


def _batch_control(u, b: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[1] != b:
        u = np.broadcast_to(u[:, :1], (u.shape[0], b))
    return u


def _directional(fun, z, v, rel):
    """Central difference of batched ``fun`` at ``z`` along ``v`` (per column)."""
    vnorm = np.sqrt(np.sum(v * v, axis=0))
    znorm = np.sqrt(np.sum(z * z, axis=0))
    safe = np.where(vnorm > 0, vnorm, 1.0)
    tau = rel * np.maximum(1.0, znorm) / safe
    both = np.concatenate([z + tau * v, z - tau * v], axis=1)
    vals = fun(both)
    b = z.shape[1]
    d = (vals[:, :b] - vals[:, b:]) / (2.0 * tau)
    return np.where(vnorm > 0, d, 0.0)


def scaled_fast_derivative_batch(sys: SpSystem, z, u, m: int,
                                 cfg: DerivativeConfig = DEFAULT) -> np.ndarray:
    """``eps**m g_m`` at stacked states ``z`` of shape ``(n, B)``.

    The recursion differentiates along the fast-time field ``(eps f_s, f_f)``
    so that every level stays ``O(1)``.
    """
    if m < 0:
        raise ContractError("derivative order must be non-negative")
    if m > cfg.m_max:
        raise UnsupportedOrderError(f"order m={m} exceeds m_max={cfg.m_max}")
    ns = sys.n_s
    analytic = cfg.uses_analytic(sys)
    levels = m - 1 if analytic else m
    rel = nested_step(levels, cfg)

    def g(k, x):
        xs, xf = x[:ns], x[ns:]
        uu = u if u.shape[1] == x.shape[1] else np.tile(u, (1, x.shape[1] // u.shape[1]))
        if k == 0:
            return sys.fast(xs, xf, uu)
        v = sys.scaled_flow(x, uu)
        if k == 1 and analytic:
            jb = _jacobian_batch(sys, xs, xf, uu, cfg)
            return (np.einsum("ijb,jb->ib", jb.d_ff_dzs, v[:ns])
                    + np.einsum("ijb,jb->ib", jb.d_ff_dzf, v[ns:]))
        return _directional(lambda y: g(k - 1, y), x, v, rel)

    u = _batch_control(u, z.shape[1])
    out = g(m, z)
    if not np.all(np.isfinite(out)):
        raise EvaluationError(f"non-finite fast derivative of order {m}")
    return out


def fast_derivative(sys: SpSystem, state: PartitionedState, u=None, m: int = 0,
                    cfg: DerivativeConfig = DEFAULT) -> np.ndarray:
    """m-th total time derivative of ``f_f`` along the flow with frozen ``u``.

    ``m=0`` is the QSSA residual ``f_f`` itself.
    """
    state.check(sys)
    u = as_control(sys, u)
    if m == 0:
        return check_finite(sys.fast(state.z_s, state.z_f, u), "fast residual")
    val = scaled_fast_derivative_batch(sys, state.vector[:, None], u[:, None], m, cfg)[:, 0]
    if cfg.scaling == "epsilon":
        return val
    return val / sys.epsilon ** m


def zddot_batch(sys: SpSystem, z, u, cfg: DerivativeConfig = DEFAULT,
                scaled: bool | None = None) -> np.ndarray:
    """Second time derivative ``J_F F`` at stacked states.

    With ``scaled`` (default: ``cfg.scaling == "epsilon"``) the fast-time
    value ``eps**2 J_F F`` is returned.
    """
    if scaled is None:
        scaled = cfg.scaling == "epsilon"
    u = _batch_control(u, z.shape[1])
    ns = sys.n_s
    jb = _jacobian_batch(sys, z[:ns], z[ns:], u, cfg)
    eps = sys.epsilon
    if scaled:
        v = sys.scaled_flow(z, u)
        top = np.concatenate([eps * jb.d_fs_dzs, eps * jb.d_fs_dzf], axis=1)
        bottom = np.concatenate([jb.d_ff_dzs, jb.d_ff_dzf], axis=1)
        jac = np.concatenate([top, bottom], axis=0)
    else:
        v = sys.flow(z, u)
        jac = jb.flow_jacobian(eps)
    out = np.einsum("ijb,jb->ib", jac, v)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("non-finite second time derivative")
    return out


def second_time_derivative(sys: SpSystem, state: PartitionedState, u=None,
                           cfg: DerivativeConfig = DEFAULT) -> np.ndarray:
    """``zddot = J_F(z) F(z)`` with ``F = (f_s, f_f / eps)``."""
    state.check(sys)
    u = as_control(sys, u)
    return zddot_batch(sys, state.vector[:, None], u[:, None], cfg)[:, 0]
