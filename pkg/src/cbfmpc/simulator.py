"""Closed-loop receding-horizon simulation.

Each step solves the controller's finite-horizon problem at the current state,
applies the first input, advances the true model, and logs barrier/Lyapunov
values together with solver diagnostics. The loop stops at the requested
horizon or at the first non-Optimal solve; no fallback input is applied, so a
log ending early documents exactly where feasibility was lost.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .controllers import (
    ControllerConfig,
    control_step,
    make_layout,
    shift_warm_start,
)
from .model import ScalarFieldSpec, StateVec, SystemModel
from .nlp import SolveStatus, SolverSettings


@dataclass
class TrajectoryLog:
    """Time series of one closed-loop run.

    ``states`` holds every visited state x_0..x_K; ``inputs`` the K applied
    inputs. ``statuses`` has one entry per attempted solve, so it is one longer
    than ``inputs`` when the run ends in a non-Optimal solve. ``completed``
    marks runs that finished all requested steps.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    h_values: np.ndarray
    v_values: np.ndarray
    statuses: List[SolveStatus]
    objectives: np.ndarray
    omegas: List[Optional[np.ndarray]]
    slacks: List[Optional[np.ndarray]]
    solve_ms: np.ndarray
    completed: bool
    config: ControllerConfig
    metadata: dict = field(default_factory=dict)

    @property
    def steps_applied(self) -> int:
        return self.inputs.shape[0]

    @property
    def final_status(self) -> SolveStatus:
        return self.statuses[-1]

    def min_barrier(self) -> float:
        return float(np.min(self.h_values)) if self.h_values.size else np.nan


def rollout(config: ControllerConfig, model: SystemModel,
            h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
            x0: StateVec, steps: int, settings: Optional[SolverSettings] = None,
            warm_start: bool = True, t0: float = 0.0) -> TrajectoryLog:
    """Run the receding-horizon loop for ``steps`` steps or until infeasibility.

    Each solve after the first is warm-started from the previous solution
    shifted by one step (disable with ``warm_start=False`` to compare against
    cold starts).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    settings = settings or SolverSettings()
    layout = make_layout(config, model)

    x = np.asarray(x0, dtype=float).reshape(model.n)
    states = [x.copy()]
    inputs: List[np.ndarray] = []
    statuses: List[SolveStatus] = []
    objectives: List[float] = []
    omegas: List[Optional[np.ndarray]] = []
    slacks: List[Optional[np.ndarray]] = []
    solve_ms: List[float] = []
    prev_z: Optional[np.ndarray] = None
    completed = True

    for _ in range(steps):
        ws = shift_warm_start(layout, model, prev_z) if (warm_start and prev_z is not None) else None
        tic = time.perf_counter()
        dec = control_step(config, model, h, V, x, settings, warm_start=ws)
        solve_ms.append(1e3 * (time.perf_counter() - tic))
        statuses.append(dec.status)
        objectives.append(dec.objective if dec.status is SolveStatus.OPTIMAL else np.nan)
        omegas.append(dec.omega_opt)
        slacks.append(dec.slack_opt)
        if dec.status is not SolveStatus.OPTIMAL:
            completed = False
            break
        inputs.append(dec.u_applied)
        prev_z = dec.result.z_opt
        x = model.step(x, dec.u_applied)
        states.append(x.copy())

    states_arr = np.asarray(states)
    times = t0 + model.dt * np.arange(states_arr.shape[0])
    h_vals = (np.array([float(h.value(s)) for s in states_arr])
              if h is not None else np.full(states_arr.shape[0], np.nan))
    v_vals = (np.array([float(V.value(s)) for s in states_arr])
              if V is not None else np.full(states_arr.shape[0], np.nan))
    return TrajectoryLog(
        times=times,
        states=states_arr,
        inputs=(np.asarray(inputs) if inputs else np.zeros((0, model.m))),
        h_values=h_vals,
        v_values=v_vals,
        statuses=statuses,
        objectives=np.asarray(objectives),
        omegas=omegas,
        slacks=slacks,
        solve_ms=np.asarray(solve_ms),
        completed=completed,
        config=config,
        metadata={
            "digest": config.digest(),
            "steps_requested": steps,
            "warm_start": warm_start,
            "seed": settings.seed,
        },
    )


def compare_gamma_sweep(config: ControllerConfig, model: SystemModel,
                        h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
                        x0: StateVec, steps: int, gammas,
                        settings: Optional[SolverSettings] = None,
                        warm_start: bool = True) -> List[TrajectoryLog]:
    """One rollout per decay rate, everything else identical."""
    gammas = list(gammas)
    if not gammas:
        raise ValueError("gamma sweep needs at least one value")
    return [rollout(replace(config, gamma=g), model, h, V, x0, steps,
                    settings=settings, warm_start=warm_start)
            for g in gammas]
