"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class SimocpError(Exception):
    """Base class for all library errors."""


class ContractError(SimocpError, ValueError):
    """A precondition on shapes, signs or options was violated."""


class EvaluationError(SimocpError, ArithmeticError):
    """A model function produced a non-finite value."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class LookupFailure(SimocpError, KeyError):
    """Unknown registry name."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UnsupportedOrderError(SimocpError, ValueError):
    """Requested derivative order exceeds the configured limit."""


class IntegrationError(SimocpError):
    """Base class for integrator failures."""


class StepSizeError(IntegrationError):
    """Step size fell below ``h_min``."""


class ImplicitSolveError(IntegrationError):
    """Newton iteration for the implicit stage equations did not converge."""

    def __init__(self, message: str, trace: list[float] | None = None):
        super().__init__(message)
        self.trace = list(trace or [])


class ManifoldError(SimocpError):
    """Base class for manifold point computation failures."""

    def __init__(self, message: str, t: float | None = None, z_s=None):
        super().__init__(message)
        self.t = t
        self.z_s = z_s


class FoldError(ManifoldError):
    """The residual Jacobian with respect to the fast variables is singular."""


class NonConvergenceError(ManifoldError):
    """Iteration cap reached without meeting the tolerance."""

    def __init__(self, message: str, history: list[float] | None = None, **kw):
        super().__init__(message, **kw)
        self.history = list(history or [])


class NlpFailure(SimocpError):
    """An NLP did not converge; carries the result and a phase tag."""

    def __init__(self, message: str, result=None, phase: str = ""):
        super().__init__(message)
        self.result = result
        self.phase = phase


class TranscriptionError(SimocpError):
    """Evaluation failure inside a shooting interval."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class ConfigError(SimocpError, ValueError):
    """Invalid run configuration."""
