"""Singularly perturbed controlled ODE systems and the benchmark registry.

A system has the partitioned form::

    dz_s/dt     = f_s(z_s, z_f, u)
    eps dz_f/dt = f_f(z_s, z_f, u)

Right-hand sides take arrays of shape ``(n,)`` or, for batched evaluation,
``(n, B)`` with the batch along the trailing axis. Registered systems are
written with broadcasting numpy expressions; user functions that cannot
broadcast are flagged ``vectorized=False`` and evaluated column by column.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, LookupFailure

Rhs = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SpSystem:
    """Controlled singularly perturbed system.

    ``jac`` optionally returns the six analytic partial derivative blocks
    ``(d_fs_dzs, d_fs_dzf, d_fs_du, d_ff_dzs, d_ff_dzf, d_ff_du)``; for
    batched inputs each block carries the batch on a trailing third axis.
    """

    n_s: int
    n_f: int
    n_u: int
    epsilon: float
    f_s: Rhs
    f_f: Rhs
    u_lower: np.ndarray = field(default=None)
    u_upper: np.ndarray = field(default=None)
    labels: Optional[Sequence[str]] = None
    jac: Optional[Callable] = None
    vectorized: bool = True
    name: str = ""

    def __post_init__(self):
        if self.n_s < 1 or self.n_f < 1 or self.n_u < 0:
            raise ContractError("need n_s >= 1, n_f >= 1, n_u >= 0")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        lo = np.full(self.n_u, -np.inf) if self.u_lower is None else self.u_lower
        hi = np.full(self.n_u, np.inf) if self.u_upper is None else self.u_upper
        lo = np.asarray(lo, dtype=float).reshape(self.n_u)
        hi = np.asarray(hi, dtype=float).reshape(self.n_u)
        if np.any(lo > hi):
            raise ContractError("u_lower must not exceed u_upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != self.n_s + self.n_f + self.n_u:
                raise ContractError("labels must name every slow, fast and control variable")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.n_s + self.n_f

    def with_epsilon(self, epsilon: float) -> "SpSystem":
        return dataclasses.replace(self, epsilon=float(epsilon))

    def column_labels(self) -> list[str]:
        if self.labels is not None:
            return list(self.labels)
        return ([f"zs{i + 1}" for i in range(self.n_s)]
                + [f"zf{i + 1}" for i in range(self.n_f)]
                + [f"u{i + 1}" for i in range(self.n_u)])

    # batched evaluation helpers; shapes (n,) or (n, B)

    def _call(self, fun: Rhs, n_out: int, zs, zf, u) -> np.ndarray:
        zs = np.asarray(zs, dtype=float)
        zf = np.asarray(zf, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = zs.shape[1:]
        if u.shape[1:] != batch:
            u = np.broadcast_to(u.reshape(self.n_u, *([1] * len(batch))), (self.n_u, *batch))
        if self.vectorized or not batch:
            out = np.asarray(fun(zs, zf, u), dtype=float)
            return np.broadcast_to(out, (n_out, *batch)) if out.shape != (n_out, *batch) else out
        out = np.empty((n_out, *batch))
        for j in range(batch[0]):
            out[:, j] = np.asarray(fun(zs[:, j], zf[:, j], u[:, j]), dtype=float).reshape(n_out)
        return out

    def slow(self, zs, zf, u) -> np.ndarray:
        return self._call(self.f_s, self.n_s, zs, zf, u)

    def fast(self, zs, zf, u) -> np.ndarray:
        return self._call(self.f_f, self.n_f, zs, zf, u)

    def flow(self, z, u) -> np.ndarray:
        """Full vector field ``(f_s, f_f / eps)`` of a stacked state."""
        zs, zf = z[: self.n_s], z[self.n_s:]
        return np.concatenate([self.slow(zs, zf, u), self.fast(zs, zf, u) / self.epsilon])

    def scaled_flow(self, z, u) -> np.ndarray:
        """Vector field in fast time, ``(eps f_s, f_f)``."""
        zs, zf = z[: self.n_s], z[self.n_s:]
        return np.concatenate([self.epsilon * self.slow(zs, zf, u), self.fast(zs, zf, u)])


@dataclass(frozen=True)
class PartitionedState:
    z_s: np.ndarray
    z_f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z_s", np.atleast_1d(np.asarray(self.z_s, dtype=float)))
        object.__setattr__(self, "z_f", np.atleast_1d(np.asarray(self.z_f, dtype=float)))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.z_s, self.z_f])

    @classmethod
    def from_vector(cls, sys: SpSystem, z) -> "PartitionedState":
        z = np.asarray(z, dtype=float)
        return cls(z[: sys.n_s], z[sys.n_s:])

    def check(self, sys: SpSystem) -> None:
        if self.z_s.shape != (sys.n_s,) or self.z_f.shape != (sys.n_f,):
            raise ContractError(
                f"state shapes {self.z_s.shape}/{self.z_f.shape} do not match "
                f"n_s={sys.n_s}, n_f={sys.n_f}")


def as_control(sys: SpSystem, u) -> np.ndarray:
    u = np.zeros(sys.n_u) if u is None else np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (sys.n_u,):
        raise ContractError(f"control has shape {u.shape}, expected ({sys.n_u},)")
    return u


def check_finite(values: np.ndarray, what: str) -> np.ndarray:
    finite = np.isfinite(values)
    if not finite.all():
        rows = finite.reshape(values.shape[0], -1).all(axis=1)
        bad = int(np.flatnonzero(~rows)[0])
        raise EvaluationError(f"non-finite {what} in component {bad}", index=bad)
    return values


def eval_rhs(sys: SpSystem, state: PartitionedState, u=None) -> np.ndarray:
    """Full right-hand side ``(f_s, f_f / eps)`` at one state."""
    state.check(sys)
    u = as_control(sys, u)
    out = np.concatenate([sys.slow(state.z_s, state.z_f, u),
                          sys.fast(state.z_s, state.z_f, u) / sys.epsilon])
    return check_finite(out, "right-hand side")


# ---------------------------------------------------------------------------
# benchmark registry


@dataclass(frozen=True)
class OcpData:
    """Running cost, horizon and initial data of a benchmark OCP.

    ``zf0`` of ``None`` selects the on-manifold start (order-0 ZDP point).
    """

    running_cost: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    horizon: float
    zs0: np.ndarray
    zf0: Optional[np.ndarray] = None


@dataclass(frozen=True)
class BenchmarkEntry:
    name: str
    system: SpSystem
    ocp: Optional[OcpData] = None
    reference_manifold: Optional[Callable[[np.ndarray], np.ndarray]] = None
    reference_manifold_derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    exact_manifold: bool = False


def invariance_defect(entry: BenchmarkEntry, zs_grid) -> np.ndarray:
    """Fast residual of the reference manifold measured against invariance.

    Returns ``f_f(z_s, h(z_s), 0) - eps h'(z_s) f_s(z_s, h(z_s), 0)`` for each
    grid point (shape ``(n_f, K)``); identically zero for an exactly
    invariant graph and ``O(eps)`` for a first-order approximation.
    """
    if entry.reference_manifold is None:
        raise ContractError(f"benchmark {entry.name!r} has no reference manifold")
    sys = entry.system
    zs = np.atleast_2d(np.asarray(zs_grid, dtype=float))
    if zs.shape[0] != sys.n_s:
        zs = zs.reshape(sys.n_s, -1)
    zf = entry.reference_manifold(zs)
    u = np.zeros((sys.n_u, zs.shape[1]))
    dh = entry.reference_manifold_derivative(zs)  # (n_f, n_s, K)
    fs = sys.slow(zs, zf, u)
    return sys.fast(zs, zf, u) - sys.epsilon * np.einsum("ijk,jk->ik", dh, fs)


def _blocks(*rows):
    return np.array(rows, dtype=float)


def _mm_fs(zs, zf, u):
    return -zs + (zs + 0.5) * zf + u


def _mm_ff(zs, zf, u):
    return zs - (zs + 1.0) * zf


def _mm_jac(zs, zf, u):
    one = np.ones_like(zs[0])
    return (_blocks([zf[0] - 1.0]), _blocks([zs[0] + 0.5]), _blocks([one]),
            _blocks([1.0 - zf[0]]), _blocks([-(zs[0] + 1.0)]), _blocks([0.0 * one]))


def _mm_cost(zs, zf, u):
    return -50.0 * zf[0] + u[0] ** 2


def michaelis_menten(epsilon: float = 0.01) -> SpSystem:
    return SpSystem(1, 1, 1, epsilon, _mm_fs, _mm_ff, u_lower=[0.0], u_upper=[10.0],
                    jac=_mm_jac, name="mmh-ocp")


def _qssa(zs):
    return zs / (1.0 + zs)


def _qssa_deriv(zs):
    return (1.0 / (1.0 + zs) ** 2)[:, None, :] if zs.ndim == 2 else (1.0 / (1.0 + zs) ** 2)[:, None]


def davis_skodje(epsilon: float = 0.1) -> SpSystem:
    """Davis-Skodje system with exact slow manifold ``y2 = y1 / (1 + y1)``."""

    def fs(zs, zf, u):
        return -zs

    def ff(zs, zf, u):
        y = zs[0]
        return (-zf[0] + ((1.0 - epsilon) * y + y * y) / (1.0 + y) ** 2)[None]

    def jac(zs, zf, u):
        y = zs[0]
        one = np.ones_like(y)
        dff = ((1.0 - epsilon) * (1.0 - y) + 2.0 * y) / (1.0 + y) ** 3
        return (_blocks([-one]), _blocks([0.0 * one]), np.zeros((1, 0) + y.shape),
                _blocks([dff]), _blocks([-one]), np.zeros((1, 0) + y.shape))

    return SpSystem(1, 1, 0, epsilon, fs, ff, jac=jac, name="davis-skodje")


def linear2_slope(epsilon: float) -> float:
    """Slope ``c`` of the invariant slow line ``z_f = c z_s`` of ``linear2``."""
    return 2.0 / ((1.0 - epsilon) + np.sqrt((1.0 - epsilon) ** 2 + 2.0 * epsilon))


def linear_system(a, b=None, n_s: int = 1, epsilon: float = 0.01,
                  u_lower=None, u_upper=None, name: str = "linear") -> SpSystem:
    """Linear two-scale system ``d/dt (z_s, eps z_f) = A z + B u``."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not 1 <= n_s < n:
        raise ContractError("A must be square with 1 <= n_s < n")
    b = np.zeros((n, 0)) if b is None else np.asarray(b, dtype=float).reshape(n, -1)
    n_u = b.shape[1]
    a_ss, a_sf, a_fs, a_ff = a[:n_s, :n_s], a[:n_s, n_s:], a[n_s:, :n_s], a[n_s:, n_s:]
    b_s, b_f = b[:n_s], b[n_s:]

    def fs(zs, zf, u):
        return a_ss @ zs + a_sf @ zf + b_s @ u

    def ff(zs, zf, u):
        return a_fs @ zs + a_ff @ zf + b_f @ u

    def jac(zs, zf, u):
        extra = zs.shape[1:]

        def rep(m):
            return np.broadcast_to(m.reshape(m.shape + (1,) * len(extra)), m.shape + extra)

        return tuple(rep(m) for m in (a_ss, a_sf, b_s, a_fs, a_ff, b_f))

    return SpSystem(n_s, n - n_s, n_u, epsilon, fs, ff, u_lower=u_lower, u_upper=u_upper,
                    jac=jac, name=name)


def linear2(epsilon: float = 0.01) -> SpSystem:
    return linear_system([[-1.0, 0.5], [1.0, -1.0]], [[1.0], [0.0]], n_s=1, epsilon=epsilon,
                         u_lower=[-1.0], u_upper=[1.0], name="linear2")


def _entry_mmh(epsilon):
    sys = michaelis_menten(0.01 if epsilon is None else epsilon)
    ocp = OcpData(_mm_cost, 5.0, np.array([1.0]))
    # QSSA graph: invariant only to O(eps)
    return BenchmarkEntry("mmh-ocp", sys, ocp, _qssa, _qssa_deriv, exact_manifold=False)


def _entry_ds(epsilon):
    sys = davis_skodje(0.1 if epsilon is None else epsilon)
    return BenchmarkEntry("davis-skodje", sys, None, _qssa, _qssa_deriv, exact_manifold=True)


def _entry_linear2(epsilon):
    sys = linear2(0.01 if epsilon is None else epsilon)
    c = linear2_slope(sys.epsilon)

    def h(zs):
        return c * zs

    def dh(zs):
        return np.full((1, 1) + zs.shape[1:], c)

    return BenchmarkEntry("linear2", sys, None, h, dh, exact_manifold=True)


_REGISTRY = {
    "mmh-ocp": _entry_mmh,
    "davis-skodje": _entry_ds,
    "linear2": _entry_linear2,
}


def available_benchmarks() -> list[str]:
    return sorted(_REGISTRY)


def registry_get(name: str, epsilon: float | None = None) -> BenchmarkEntry:
    """Look up a registered benchmark, optionally overriding its epsilon."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise LookupFailure(
            f"unknown benchmark {name!r}; available: {', '.join(available_benchmarks())}"
        ) from None
    return factory(epsilon)
