"""Experiment runner: declarative configs in, CSV artifacts and a report out.

A config file describes one experiment (feasibility map, closed-loop rollout,
decay-rate sweep, or a subset check between two formulations) together with
the assertions it must satisfy. Running it writes per-run artifacts into the
output directory:

* ``grid_*.csv``        one row per sampled state: x, v, a, feasible,
                        status, violation, solve_ms
* ``trajectory_*.csv``  one row per visited state: t, x, v, a, j, h, V,
                        status, objective, omega, slack, solve_ms
* ``manifest.json``     resolved config, versions, seed, timings
* ``report.txt``        one PASS/FAIL line per declared assertion

Exit codes: 0 all assertions pass, 1 assertion failure, 2 usage or config
error, 3 internal error. Errors also emit a machine-readable JSON record on
stderr. Bundled presets mirror the benchmark scenarios (``list-presets``).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import yaml

from . import __version__
from .controllers import ControllerConfig, Formulation, InvalidConfigurationError
from .feasibility import FeasibilityGrid, PointStatus, compare, sample_grid
from .model import (
    ScalarFieldSpec,
    SystemModel,
    barrier_halfspace,
    barrier_sphere,
    lqr_cost_to_go,
    lyapunov_quadratic,
    triple_integrator,
)
from .nlp import SolverSettings
from .simulator import TrajectoryLog, rollout

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_INTERNAL = 3

_FLOAT_FMT = "%.12g"


class ConfigError(ValueError):
    pass


# --- config parsing -------------------------------------------------------------

def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _build_model(d: Optional[dict]) -> SystemModel:
    d = dict(d or {})
    _check_keys(d, {"dt", "j_min", "j_max", "state_lower", "state_upper"}, "model")
    model = triple_integrator(float(d.get("dt", 0.1)), float(d.get("j_min", -1.0)),
                              float(d.get("j_max", 1.0)))
    if "state_lower" in d or "state_upper" in d:
        model = replace(
            model,
            state_lower=np.asarray(d["state_lower"], dtype=float) if "state_lower" in d else None,
            state_upper=np.asarray(d["state_upper"], dtype=float) if "state_upper" in d else None,
        )
    return model


def _build_barrier(name: Optional[str]) -> Optional[ScalarFieldSpec]:
    if name is None:
        return None
    if name == "halfspace":
        return barrier_halfspace()
    if name == "sphere":
        return barrier_sphere()
    raise ConfigError(f"unknown barrier {name!r} (expected 'halfspace' or 'sphere')")


def _build_lyapunov(entry, model: SystemModel) -> Optional[ScalarFieldSpec]:
    if entry is None:
        return None
    if entry == "identity":
        return lyapunov_quadratic(np.eye(model.n))
    if not isinstance(entry, dict):
        raise ConfigError("lyapunov must be 'identity' or a mapping")
    _check_keys(entry, {"kind", "weights", "Q", "R"}, "lyapunov")
    kind = entry.get("kind", "quadratic")
    if kind == "quadratic":
        W = np.asarray(entry["weights"], dtype=float)
        if W.ndim == 1:
            W = np.diag(W)
        return lyapunov_quadratic(W)
    if kind == "lqr":
        Q = np.asarray(entry["Q"], dtype=float)
        if Q.ndim == 1:
            Q = np.diag(Q)
        R = np.asarray(entry.get("R", 1.0), dtype=float)
        if R.ndim == 0:
            R = float(R) * np.eye(model.m)
        elif R.ndim == 1:
            R = np.diag(R)
        return lyapunov_quadratic(lqr_cost_to_go(model, Q, R))
    raise ConfigError(f"unknown lyapunov kind {kind!r}")


_CONTROLLER_KEYS = {"formulation", "N", "M_cbf", "M_clf", "gamma", "alpha", "beta",
                    "Q", "R", "P_terminal", "P_omega", "P_slack", "H_input",
                    "gcbf_relative_degree", "goal_state"}


def _build_controller(d: dict, where: str = "controller") -> ControllerConfig:
    if not isinstance(d, dict) or "formulation" not in d:
        raise ConfigError(f"{where} must be a mapping with a 'formulation' key")
    _check_keys(d, _CONTROLLER_KEYS, where)
    kw = dict(d)
    name = str(kw.pop("formulation"))
    try:
        form = Formulation(name)
    except ValueError:
        raise ConfigError(f"unknown formulation {name!r}") from None
    for key in ("Q", "R", "P_terminal", "H_input", "goal_state"):
        if key in kw and isinstance(kw[key], (list, tuple)):
            kw[key] = np.asarray(kw[key], dtype=float)
    return ControllerConfig(formulation=form, **kw)


def _build_settings(d: Optional[dict], seed: int, verbose: bool) -> SolverSettings:
    d = dict(d or {})
    _check_keys(d, {"feas_tol", "opt_tol", "max_iterations", "merit_growth",
                    "multistart_count"}, "solver")
    return SolverSettings(
        feas_tol=float(d.get("feas_tol", 1e-6)),
        opt_tol=float(d.get("opt_tol", 1e-6)),
        max_iterations=int(d.get("max_iterations", 200)),
        merit_growth=float(d.get("merit_growth", 10.0)),
        multistart_count=int(d.get("multistart_count", 3)),
        seed=seed,
        verbose=verbose,
    )


# --- CSV writers ------------------------------------------------------------------

def write_grid_csv(grid: FeasibilityGrid, path: Path) -> None:
    names = ["x", "v", "a"] if len(grid.axes) == 3 else [f"x{d}" for d in range(len(grid.axes))]
    pts = grid.points()
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names + ["feasible", "status", "violation", "solve_ms"]) + "\n")
        for i in range(pts.shape[0]):
            coords = ",".join(_FLOAT_FMT % c for c in pts[i])
            status = PointStatus(int(grid.status[i])).code
            viol = "" if np.isnan(grid.violation[i]) else _FLOAT_FMT % grid.violation[i]
            fh.write(f"{coords},{int(grid.classification[i])},{status},{viol},"
                     f"{grid.solve_ms[i]:.3f}\n")


def write_trajectory_csv(log: TrajectoryLog, path: Path) -> None:
    n_rows = log.states.shape[0]
    with open(path, "w", newline="") as fh:
        fh.write("t,x,v,a,j,h,V,status,objective,omega,slack,solve_ms\n")
        for k in range(n_rows):
            state = ",".join(_FLOAT_FMT % c for c in log.states[k])
            j = _FLOAT_FMT % log.inputs[k, 0] if k < log.inputs.shape[0] else ""
            if k < len(log.statuses):
                status = log.statuses[k].value
                obj = "" if np.isnan(log.objectives[k]) else _FLOAT_FMT % log.objectives[k]
                omega = (";".join(_FLOAT_FMT % w for w in log.omegas[k])
                         if log.omegas[k] is not None else "")
                slack = (";".join(_FLOAT_FMT % s for s in log.slacks[k])
                         if log.slacks[k] is not None else "")
                ms = f"{log.solve_ms[k]:.3f}"
            else:
                status, obj, omega, slack, ms = "end", "", "", "", ""
            hv = _FLOAT_FMT % log.h_values[k] if not np.isnan(log.h_values[k]) else ""
            vv = _FLOAT_FMT % log.v_values[k] if not np.isnan(log.v_values[k]) else ""
            fh.write(f"{_FLOAT_FMT % log.times[k]},{state},{j},{hv},{vv},"
                     f"{status},{obj},{omega},{slack},{ms}\n")


def _gamma_tag(g: float) -> str:
    return ("%g" % g).replace(".", "p")


# --- experiment kinds ---------------------------------------------------------------

_TOP_KEYS = {"kind", "seed", "model", "barrier", "lyapunov", "controller",
             "controllers", "gammas", "grid", "x0", "steps", "solver", "assertions",
             "description"}


def run_experiment(config: dict, out_dir: Path, jobs: int = 1,
                   seed_override: Optional[int] = None,
                   verbose: bool = False) -> Tuple[int, List[str]]:
    """Execute one experiment config; returns (exit_code, report_lines)."""
    if not isinstance(config, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(config, _TOP_KEYS, "config")
    kind = config.get("kind")
    if kind not in ("feasibility_map", "rollout", "gamma_sweep", "subset_check"):
        raise ConfigError(f"unknown experiment kind {kind!r}")
    seed = int(seed_override if seed_override is not None else config.get("seed", 0))
    model = _build_model(config.get("model"))
    h = _build_barrier(config.get("barrier"))
    V = _build_lyapunov(config.get("lyapunov"), model)
    settings = _build_settings(config.get("solver"), seed, verbose)
    assertions = dict(config.get("assertions") or {})
    out_dir.mkdir(parents=True, exist_ok=True)

    t_start = time.time()
    tic = time.perf_counter()
    report: List[str] = []
    artifacts: List[str] = []

    def emit(line: str) -> None:
        report.append(line)
        if verbose:
            print(line)

    if kind == "subset_check":
        _check_keys(assertions, {"subset", "b_gamma_invariant", "a_gamma_monotone"},
                    "assertions")
        ctrls = config.get("controllers")
        if not isinstance(ctrls, dict) or set(ctrls) != {"a", "b"}:
            raise ConfigError("subset_check needs controllers: {a: ..., b: ...}")
        cfg_a = _build_controller(ctrls["a"], "controllers.a")
        cfg_b = _build_controller(ctrls["b"], "controllers.b")
        gammas = [float(g) for g in config.get("gammas") or []]
        if not gammas:
            raise ConfigError("subset_check needs a nonempty gammas list")
        grid_spec = config.get("grid") or {}
        _check_keys(grid_spec, {"box", "resolution"}, "grid")
        box = grid_spec.get("box", [[-2.0, 0.0], [0.0, 2.0], [0.0, 2.0]])
        resolution = grid_spec.get("resolution", 9)
        grids = {}
        for label, cfg in (("a", cfg_a), ("b", cfg_b)):
            for g in gammas:
                grid = sample_grid(replace(cfg, gamma=g), model, h, V, box, resolution,
                                   settings, jobs=jobs)
                grids[(label, g)] = grid
                fname = f"grid_{label}_{cfg.formulation.value.lower()}_gamma{_gamma_tag(g)}.csv"
                write_grid_csv(grid, out_dir / fname)
                artifacts.append(fname)
        if assertions.get("subset", True):
            for g in gammas:
                c = compare(grids[("a", g)], grids[("b", g)])
                ok = not c.subset_violations
                emit(f"{'PASS' if ok else 'FAIL'} subset gamma={g:g} "
                     f"({len(c.subset_violations)} violations, a_only={c.a_only}, "
                     f"both={c.both}, b_only={c.b_only})")
        if assertions.get("b_gamma_invariant", False):
            base = grids[("b", gammas[0])]
            diffs = sum(int(np.sum(base.classification
                                   != grids[("b", g)].classification))
                        for g in gammas[1:])
            emit(f"{'PASS' if diffs == 0 else 'FAIL'} gamma-invariance of "
                 f"{cfg_b.formulation.value} ({diffs} flipped points)")
        if assertions.get("a_gamma_monotone", False):
            bad = 0
            for g1, g2 in zip(gammas, gammas[1:]):
                if g1 > g2:
                    raise ConfigError("a_gamma_monotone expects gammas in increasing order")
                bad += int(np.sum(grids[("a", g1)].classification
                                  & ~grids[("a", g2)].classification))
            emit(f"{'PASS' if bad == 0 else 'FAIL'} gamma-monotonicity of "
                 f"{cfg_a.formulation.value} ({bad} violations)")

    elif kind == "feasibility_map":
        _check_keys(assertions, set(), "assertions")
        cfg = _build_controller(config.get("controller") or {}, "controller")
        gammas = config.get("gammas")
        grid_spec = config.get("grid") or {}
        _check_keys(grid_spec, {"box", "resolution"}, "grid")
        box = grid_spec.get("box", [[-2.0, 0.0], [0.0, 2.0], [0.0, 2.0]])
        resolution = grid_spec.get("resolution", 9)
        sweep = [float(g) for g in gammas] if gammas else [None]
        for g in sweep:
            run_cfg = replace(cfg, gamma=g) if g is not None else cfg
            grid = sample_grid(run_cfg, model, h, V, box, resolution, settings, jobs=jobs)
            tag = f"_gamma{_gamma_tag(g)}" if g is not None else ""
            fname = f"grid_{cfg.formulation.value.lower()}{tag}.csv"
            write_grid_csv(grid, out_dir / fname)
            artifacts.append(fname)
            emit(f"INFO feasibility map {cfg.formulation.value}"
                 + (f" gamma={g:g}" if g is not None else "")
                 + f": {grid.counts()}")

    else:  # rollout | gamma_sweep
        _check_keys(assertions, {"all_optimal", "safety", "dominance"}, "assertions")
        cfg = _build_controller(config.get("controller") or {}, "controller")
        x0 = np.asarray(config.get("x0", [-2.0, 0.0, 1.0]), dtype=float)
        steps = int(config.get("steps", 100))
        if kind == "rollout":
            sweep = [None]
        else:
            sweep = [float(g) for g in config.get("gammas") or []]
            if not sweep:
                raise ConfigError("gamma_sweep needs a nonempty gammas list")
        logs = []
        for g in sweep:
            run_cfg = replace(cfg, gamma=g) if g is not None else cfg
            log = rollout(run_cfg, model, h, V, x0, steps, settings)
            logs.append((g, log))
            tag = f"_gamma{_gamma_tag(g)}" if g is not None else ""
            fname = f"trajectory_{cfg.formulation.value.lower()}{tag}.csv"
            write_trajectory_csv(log, out_dir / fname)
            artifacts.append(fname)
            last_t = log.times[-1]
            emit(f"INFO {cfg.formulation.value}" + (f" gamma={g:g}" if g is not None else "")
                 + f": steps={log.steps_applied} completed={log.completed} "
                   f"final_status={log.final_status.value} t_end={last_t:g}s "
                   f"min_h={log.min_barrier():g}")
        if assertions.get("all_optimal", False):
            bad = [g for g, log in logs if not log.completed]
            emit(f"{'PASS' if not bad else 'FAIL'} all-optimal over "
                 f"{len(logs)} run(s)" + (f" (failed: {bad})" if bad else ""))
        if assertions.get("safety", False):
            bad = [g for g, log in logs
                   if log.completed and not log.min_barrier() >= -1e-8]
            emit(f"{'PASS' if not bad else 'FAIL'} closed-loop safety h >= -1e-8"
                 + (f" (violated: {bad})" if bad else ""))
        if assertions.get("dominance", False):
            ok = True
            for (g1, l1), (g2, l2) in zip(logs, logs[1:]):
                if g1 is None or g2 is None or g1 > g2:
                    raise ConfigError("dominance expects gammas in increasing order")
                n = min(l1.h_values.shape[0], l2.h_values.shape[0])
                if not np.all(l1.h_values[:n] >= l2.h_values[:n] - 1e-6):
                    ok = False
            emit(f"{'PASS' if ok else 'FAIL'} smaller-gamma barrier dominance "
                 f"over common prefixes")

    wall = time.perf_counter() - tic
    manifest = {
        "version": __version__,
        "numpy": np.__version__,
        "python": sys.version.split()[0],
        "started_unix": t_start,
        "wall_time_s": wall,
        "seed": seed,
        "jobs": jobs,
        "config": config,
        "artifacts": artifacts,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    with open(out_dir / "report.txt", "w") as fh:
        fh.write("\n".join(report) + "\n")
    failed = any(line.startswith("FAIL") for line in report)
    return (EXIT_ASSERTION if failed else EXIT_OK), report


# --- presets ---------------------------------------------------------------------

def _preset_dir():
    return resources.files("cbfmpc") / "presets"


def list_presets() -> List[Tuple[str, str]]:
    """Names and one-line descriptions of the bundled scenario files."""
    entries = []
    root = _preset_dir()
    if not root.is_dir():
        return entries
    for item in sorted(root.iterdir(), key=lambda p: p.name):
        if item.name.endswith(".yaml"):
            data = yaml.safe_load(item.read_text()) or {}
            entries.append((item.name[:-5], str(data.get("description", ""))))
    return entries


def load_config(name_or_path: str) -> Tuple[dict, str]:
    """Resolve a preset name or a filesystem path to a parsed config."""
    preset = _preset_dir() / f"{name_or_path}.yaml"
    if preset.is_file():
        return yaml.safe_load(preset.read_text()), name_or_path
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigError(f"no such config file or preset: {name_or_path!r}")
    with open(path) as fh:
        return yaml.safe_load(fh), path.stem


# --- entry point --------------------------------------------------------------------

def _error_record(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cbfmpc",
        description="Safety-critical MPC experiments with discrete-time control "
                    "barrier functions.")
    sub = parser.add_subparsers(dest="command")
    p_run = sub.add_parser("run", help="run an experiment config or preset")
    p_run.add_argument("config", help="path to a YAML config or a preset name")
    p_run.add_argument("--out", default=None, help="output directory (default: ./runs/<name>)")
    p_run.add_argument("--jobs", type=int, default=1, help="worker processes for grids")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--verbose", action="store_true")
    sub.add_parser("list-presets", help="list bundled scenario files")

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK

    if args.command == "list-presets":
        for name, desc in list_presets():
            print(f"{name:18s} {desc}")
        return EXIT_OK
    if args.command != "run":
        parser.print_help()
        return EXIT_CONFIG

    try:
        config, name = load_config(args.config)
        out_dir = Path(args.out) if args.out else Path("runs") / name
        code, report = run_experiment(config, out_dir, jobs=args.jobs,
                                      seed_override=args.seed, verbose=args.verbose)
    except (ConfigError, InvalidConfigurationError, ValueError) as exc:
        _error_record("config", str(exc))
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - defensive
        _error_record("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL
    if not args.verbose:
        for line in report:
            print(line)
    return code


if __name__ == "__main__":
    sys.exit(main())
