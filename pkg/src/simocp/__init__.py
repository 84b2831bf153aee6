"""Slow invariant manifolds and multiple-time-scale optimal control."""

from .calculus import DerivativeConfig, fast_derivative, jacobian, second_time_derivative
from .errors import (ConfigError, ContractError, EvaluationError, FoldError, ImplicitSolveError,
                     IntegrationError, LookupFailure, ManifoldError, NlpFailure,
                     NonConvergenceError, SimocpError, StepSizeError, TranscriptionError,
                     UnsupportedOrderError)
from .integrate import (IntegratorConfig, IntegratorStats, PiecewiseConstant, Trajectory,
                        integrate, integrate_on_manifold)
from .manifold import (ManifoldPoint, ManifoldSpec, curvature_bvp_solve, curvature_local_solve,
                       ift_sensitivities, solve_point, zdp_solve)
from .model import (BenchmarkEntry, OcpData, PartitionedState, SpSystem, available_benchmarks,
                    registry_get)
from .nlp import NlpOptions, NlpProblem, NlpResult, solve
from .ocp import OcpProblem, OcpSolution, compare_formulations, solve_ocp, transcribe

__version__ = "0.1.0"
