"""Batch front end: ``simocp {simulate,manifold,solve,compare} CONFIG.json``.

The config is a single JSON object with a strict schema (unknown keys are
rejected). Outputs go to ``output_dir`` (overridden by ``SIMOCP_OUTPUT_DIR``).
Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, ContractError, FoldError, LookupFailure, SimocpError
from .integrate import IntegratorConfig, PiecewiseConstant, integrate
from .manifold import ManifoldSpec, solve_point
from .model import PartitionedState, SpSystem, linear_system, registry_get
from .nlp import NlpOptions
from .ocp import FORMULATIONS, N_SAMPLES, OcpProblem, compare_formulations, solve_ocp

ENV_OUTPUT = "SIMOCP_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

_TOP_KEYS = {"benchmark", "system", "epsilon", "formulation", "formulations", "manifold", "N",
             "integrator", "nlp", "output_dir", "control", "horizon", "zs0", "zf0",
             "zs_grid", "init", "quadrature"}
_SYSTEM_KEYS = {"a", "b", "n_s", "u_lower", "u_upper", "name"}
_MANIFOLD_KEYS = {"method", "m", "tol", "max_iters", "bvp_horizon"}
_INTEGRATOR_KEYS = {"method", "abs_tol", "rel_tol", "h_init", "h_min", "h_max", "newton_tol",
                    "newton_max_iters", "max_steps"}
_NLP_KEYS = {"tol", "constraint_tol", "max_iters", "max_line_search"}
_GRID_KEYS = {"start", "stop", "num"}
_INITS = ("midpoint", "zero", "reduced")


def _reject_unknown(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    extra = sorted(set(section) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")


def _number(cfg: dict, key: str, default=None, positive=False, integer=False, where=""):
    name = f"{where}{key}"
    if key not in cfg:
        return default
    val = cfg[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(f"{name}: expected an integer, got {val!r}")
    if not np.isfinite(val):
        raise ConfigError(f"{name}: must be finite")
    if positive and not val > 0:
        raise ConfigError(f"{name}: must be positive, got {val!r}")
    return int(val) if integer else float(val)


def _vector(val, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(val, dtype=float)) if _is_numeric(val) else None
    if arr is None or arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name}: expected a finite number or list of numbers")
    return arr


def _is_numeric(val) -> bool:
    if isinstance(val, bool):
        return False
    if isinstance(val, (int, float)):
        return True
    return isinstance(val, list) and all(_is_numeric(v) and not isinstance(v, list) for v in val)


@dataclass
class RunConfig:
    """Validated run configuration; build with :meth:`from_dict`."""

    system: SpSystem
    benchmark: Optional[str]
    ocp_problem: Optional[OcpProblem]
    horizon: float
    zs0: np.ndarray
    zf0: Optional[np.ndarray]
    control: Any
    integrator: IntegratorConfig
    manifold: ManifoldSpec
    formulations: list
    zs_grid: np.ndarray
    init: str
    output_dir: Path
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, cfg: dict, output_override: Optional[str] = None) -> "RunConfig":
        _reject_unknown(cfg, _TOP_KEYS, "config")
        if ("benchmark" in cfg) == ("system" in cfg):
            raise ConfigError("config: give exactly one of 'benchmark' or 'system'")
        eps = _number(cfg, "epsilon", positive=True)
        if "epsilon" in cfg and eps is None:
            raise ConfigError("epsilon: must be positive")
        entry = None
        if "benchmark" in cfg:
            if not isinstance(cfg["benchmark"], str):
                raise ConfigError("benchmark: expected a string")
            try:
                entry = registry_get(cfg["benchmark"], eps)
            except LookupFailure as exc:
                raise ConfigError(f"benchmark: {exc}") from None
            system = entry.system
        else:
            sec = cfg["system"]
            _reject_unknown(sec, _SYSTEM_KEYS, "system")
            try:
                system = linear_system(sec["a"], sec.get("b"), n_s=int(sec.get("n_s", 1)),
                                       epsilon=0.01 if eps is None else eps,
                                       u_lower=sec.get("u_lower"), u_upper=sec.get("u_upper"),
                                       name=str(sec.get("name", "linear")))
            except KeyError:
                raise ConfigError("system.a: required") from None
            except (ContractError, ValueError, TypeError) as exc:
                raise ConfigError(f"system: {exc}") from None

        integ = cls._integrator(cfg.get("integrator", {}))
        spec = cls._manifold(cfg.get("manifold", {}))
        nlp = cls._nlp(cfg.get("nlp", {}))

        default_T = entry.ocp.horizon if entry is not None and entry.ocp is not None else 1.0
        horizon = _number(cfg, "horizon", default_T)
        if horizon < 0:
            raise ConfigError("horizon: must be non-negative")
        if "zs0" in cfg:
            zs0 = _vector(cfg["zs0"], "zs0")
        elif entry is not None and entry.ocp is not None:
            zs0 = entry.ocp.zs0
        else:
            zs0 = np.ones(system.n_s)
        if zs0.shape != (system.n_s,):
            raise ConfigError(f"zs0: expected {system.n_s} value(s)")
        zf0 = None
        if "zf0" in cfg and cfg["zf0"] != "on-manifold":
            zf0 = _vector(cfg["zf0"], "zf0")
            if zf0.shape != (system.n_f,):
                raise ConfigError(f"zf0: expected {system.n_f} value(s)")

        control = cls._control(cfg.get("control"), system, horizon)
        forms = cls._formulations(cfg)
        grid = cls._grid(cfg.get("zs_grid", []), system)
        init = cfg.get("init", "midpoint")
        if init not in _INITS:
            raise ConfigError(f"init: expected one of {_INITS}, got {init!r}")
        quad = cfg.get("quadrature", "state")
        if quad not in ("state", "trapezoid"):
            raise ConfigError("quadrature: expected 'state' or 'trapezoid'")
        N = _number(cfg, "N", 20, integer=True)
        if N < 1:
            raise ConfigError("N: must be at least 1")

        problem = None
        if entry is not None and entry.ocp is not None:
            kw = dict(N=N, nlp=nlp, quadrature=quad)
            if integ is not None:
                kw["integrator"] = integ
            if zf0 is not None:
                kw.update(zf0_policy="given", zf0=zf0)
            try:
                problem = OcpProblem.from_benchmark(entry, "full", **kw)
            except ContractError as exc:
                raise ConfigError(f"config: {exc}") from None
            if horizon > 0:
                problem = dataclasses.replace(problem, horizon=horizon, zs0=zs0)

        out = output_override or os.environ.get(ENV_OUTPUT) or cfg.get("output_dir", "out")
        return cls(system, cfg.get("benchmark"), problem, horizon, zs0, zf0, control,
                   integ or IntegratorConfig(method="radau2a", rel_tol=1e-8, abs_tol=1e-10),
                   spec, forms, grid, init, Path(out), dict(cfg))

    @staticmethod
    def _integrator(sec) -> Optional[IntegratorConfig]:
        _reject_unknown(sec, _INTEGRATOR_KEYS, "integrator")
        if not sec:
            return None
        kw = {}
        if "method" in sec:
            kw["method"] = sec["method"]
        for key in ("abs_tol", "rel_tol", "h_init", "h_min", "h_max", "newton_tol"):
            if key in sec:
                kw[key] = _number(sec, key, positive=True, where="integrator.")
        for key in ("newton_max_iters", "max_steps"):
            if key in sec:
                kw[key] = _number(sec, key, integer=True, positive=True, where="integrator.")
        kw.setdefault("rel_tol", 1e-8)
        kw.setdefault("abs_tol", 1e-10)
        try:
            return IntegratorConfig(**{"method": "radau2a", **kw})
        except ContractError as exc:
            raise ConfigError(f"integrator: {exc}") from None

    @staticmethod
    def _manifold(sec) -> ManifoldSpec:
        _reject_unknown(sec, _MANIFOLD_KEYS, "manifold")
        kw = {}
        if "method" in sec:
            kw["method"] = sec["method"]
        if "m" in sec:
            kw["m"] = _number(sec, "m", integer=True, where="manifold.")
        if "max_iters" in sec:
            kw["max_iters"] = _number(sec, "max_iters", integer=True, positive=True, where="manifold.")
        for key in ("tol", "bvp_horizon"):
            if key in sec:
                kw[key] = _number(sec, key, positive=True, where="manifold.")
        try:
            return ManifoldSpec(**kw)
        except ContractError as exc:
            raise ConfigError(f"manifold: {exc}") from None

    @staticmethod
    def _nlp(sec) -> NlpOptions:
        _reject_unknown(sec, _NLP_KEYS, "nlp")
        base = OcpProblem.__dataclass_fields__["nlp"].default
        kw = {}
        for key in ("tol", "constraint_tol"):
            if key in sec:
                kw[key] = _number(sec, key, positive=True, where="nlp.")
        for key in ("max_iters", "max_line_search"):
            if key in sec:
                kw[key] = _number(sec, key, integer=True, positive=True, where="nlp.")
        return dataclasses.replace(base, **kw)

    @staticmethod
    def _control(val, system: SpSystem, horizon: float):
        if val is None:
            return np.clip(np.zeros(system.n_u), system.u_lower, system.u_upper)
        if isinstance(val, dict):
            _reject_unknown(val, {"breakpoints", "values"}, "control")
            try:
                ctrl = PiecewiseConstant(val["breakpoints"], val["values"])
            except KeyError as exc:
                raise ConfigError(f"control.{exc.args[0]}: required") from None
            except (ContractError, ValueError, TypeError) as exc:
                raise ConfigError(f"control: {exc}") from None
            vals = ctrl.values
        else:
            vals = _vector(val, "control")[None, :]
            ctrl = vals[0]
        if vals.shape[1] != system.n_u:
            raise ConfigError(f"control: expected {system.n_u} component(s)")
        if np.any(vals < system.u_lower) or np.any(vals > system.u_upper):
            raise ConfigError("control: values outside the control bounds")
        return ctrl

    @staticmethod
    def _formulations(cfg) -> list:
        if "formulations" in cfg:
            forms = cfg["formulations"]
            if not isinstance(forms, list) or not forms:
                raise ConfigError("formulations: expected a non-empty list")
        else:
            forms = [cfg.get("formulation", "lifted")]
        for f in forms:
            if f not in FORMULATIONS:
                raise ConfigError(f"formulation: expected one of {FORMULATIONS}, got {f!r}")
        return list(forms)

    @staticmethod
    def _grid(val, system: SpSystem) -> np.ndarray:
        if isinstance(val, dict):
            _reject_unknown(val, _GRID_KEYS, "zs_grid")
            try:
                num = int(val["num"])
                pts = np.linspace(float(val["start"]), float(val["stop"]), num)
            except (KeyError, TypeError, ValueError):
                raise ConfigError("zs_grid: need numeric start, stop and num") from None
            if system.n_s != 1:
                raise ConfigError("zs_grid: {start, stop, num} needs one slow variable; "
                                  "list the points instead")
            return pts.reshape(-1, 1)
        if not isinstance(val, list):
            raise ConfigError("zs_grid: expected a list or {start, stop, num}")
        if not val:
            return np.zeros((0, system.n_s))
        try:
            pts = np.asarray(val, dtype=float).reshape(len(val), -1)
        except (TypeError, ValueError):
            raise ConfigError("zs_grid: entries must be numbers or lists of numbers") from None
        if len(val) and pts.shape[1] != system.n_s:
            raise ConfigError(f"zs_grid: points need {system.n_s} component(s)")
        return pts.reshape(-1, system.n_s)

    def problem(self, formulation: str) -> OcpProblem:
        if self.ocp_problem is None:
            raise ConfigError("solve/compare need a benchmark with an optimal control problem")
        spec = None if formulation == "full" else self.manifold
        return self.ocp_problem.with_formulation(formulation, spec)


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv(path: Path, header: list, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def read_csv(path: Path):
    """Header and rows; numeric fields become floats."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))

    def conv(v):
        try:
            return float(v)
        except ValueError:
            return v

    return rows[0], [[conv(v) for v in r] for r in rows[1:]]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else str(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _trajectory_rows(traj):
    return [[t, *zs, *zf, *u] for t, zs, zf, u in zip(traj.times, traj.z_s, traj.z_f, traj.u)]


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(rc: RunConfig) -> int:
    sys_ = rc.system
    zf0 = rc.zf0
    if zf0 is None:
        u0 = rc.control(0.0) if isinstance(rc.control, PiecewiseConstant) else rc.control
        zf0 = solve_point(sys_, rc.zs0, u0, ManifoldSpec()).z_f
    times = np.linspace(0.0, rc.horizon, N_SAMPLES) if rc.horizon > 0 else np.array([0.0])
    traj = integrate(sys_, PartitionedState(rc.zs0, zf0), rc.control, (0.0, rc.horizon),
                     rc.integrator, t_eval=times if rc.horizon > 0 else None)
    write_csv(rc.output_dir / "trajectory.csv", ["t"] + sys_.column_labels(),
              _trajectory_rows(traj))
    write_json(rc.output_dir / "simulate.json", {"integrator_stats": traj.stats.as_dict(),
                                                  "rows": len(traj)})
    return EXIT_OK


def cmd_manifold(rc: RunConfig) -> int:
    sys_ = rc.system
    u = rc.control(0.0) if isinstance(rc.control, PiecewiseConstant) else rc.control
    labels = sys_.column_labels()
    header = labels[: sys_.n] + ["residual", "method", "status"]
    rows, warnings = [], 0
    for zs in rc.zs_grid:
        try:
            pt = solve_point(sys_, zs, u, rc.manifold)
            rows.append([*zs, *pt.z_f, pt.residual_norm, rc.manifold.tag, "ok"])
        except FoldError:
            warnings += 1
            rows.append([*zs, *([np.nan] * sys_.n_f), np.nan, rc.manifold.tag, "fold"])
        except SimocpError as exc:
            warnings += 1
            rows.append([*zs, *([np.nan] * sys_.n_f), np.nan, rc.manifold.tag,
                         type(exc).__name__])
    write_csv(rc.output_dir / "manifold.csv", header, rows)
    if warnings:
        print(f"warning: {warnings} manifold point(s) failed; see the status column",
              file=sys.stderr)
    return EXIT_OK


def _solution_report(sol) -> dict:
    res = sol.nlp
    return {
        "formulation": sol.formulation,
        "status": res.status,
        "objective": sol.objective,
        "nlp_objective": res.objective_value,
        "kkt_residual": res.kkt_residual,
        "constraint_violation": res.constraint_violation,
        "iterations": res.iterations,
        "evaluations": sol.evaluations,
        "integrator_stats": sol.stats.as_dict(),
        "node_residual_max": (None if sol.node_residual is None
                              else float(np.max(np.abs(sol.node_residual)))),
        "u_min": float(np.min(sol.samples.u)) if sol.samples.u.size else None,
        "u_max": float(np.max(sol.samples.u)) if sol.samples.u.size else None,
    }


def _init_for(rc: RunConfig, p: OcpProblem):
    if rc.init == "reduced":
        return solve_ocp(p.with_formulation("reduced", rc.manifold))
    return rc.init


def cmd_solve(rc: RunConfig) -> int:
    p = rc.problem(rc.formulations[0])
    sol = solve_ocp(p, _init_for(rc, p), raise_on_failure=False)
    write_csv(rc.output_dir / "trajectory.csv", ["t"] + rc.system.column_labels(),
              _trajectory_rows(sol.samples))
    report = _solution_report(sol)
    report["timing"] = dict(sol.wall_time_seconds)
    write_json(rc.output_dir / "report.json", report)
    if not sol.converged:
        print(f"error: NLP ended with status {sol.nlp.status}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_compare(rc: RunConfig) -> int:
    if rc.init == "reduced":
        raise ConfigError("init: 'reduced' is not supported by compare")
    rep = compare_formulations(rc.problem("full"), rc.formulations, rc.init, rc.manifold)
    sols = rep["solutions"]
    report = {
        "formulations": rep["order"],
        "pairs": rep["pairs"],
        "failures": rep["failures"],
        "solutions": {k: _solution_report(s) for k, s in sols.items()},
        "timing": {"wall_time_ratios": rep["wall_time_ratios"],
                   "wall_time_seconds": {k: s.wall_time_seconds for k, s in sols.items()}},
    }
    write_json(rc.output_dir / "compare.json", report)
    if sols:
        labels = rc.system.column_labels()
        header, cols = ["t"], []
        any_sol = next(iter(sols.values()))
        for tag in rep["order"]:
            if tag in sols:
                s = sols[tag].samples
                header += [f"{lab}_{tag}" for lab in labels]
                cols.append(np.concatenate([s.z_s, s.z_f, s.u], axis=1))
        rows = np.concatenate([any_sol.samples.times[:, None]] + cols, axis=1)
        write_csv(rc.output_dir / "compare.csv", header, rows.tolist())
    if rep["failures"]:
        for tag, msg in rep["failures"].items():
            print(f"error: {tag}: {msg}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "manifold": cmd_manifold, "solve": cmd_solve,
            "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="simocp", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config", help="path to the JSON run configuration")
    ap.add_argument("--output-dir", help="override output_dir (and the environment variable)")
    ap.add_argument("--init", choices=_INITS, help="override the NLP initial guess")
    return ap


def load_config(path: str, output_override: Optional[str] = None,
                init: Optional[str] = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if init is not None:
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
        raw = {**raw, "init": init}
    return RunConfig.from_dict(raw, output_override)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_config(args.config, args.output_dir, args.init)
        return COMMANDS[args.command](rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimocpError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
