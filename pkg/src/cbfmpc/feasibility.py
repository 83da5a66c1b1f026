"""Feasibility-region analysis over sampled state grids.

``sample_grid`` classifies every point of a state box as feasible or
infeasible for a controller configuration using the solver's restoration
certificates, ``compare`` runs exact set algebra between two grids, and
``brute_force_feasible`` is an independent oracle that enumerates discretized
input sequences and checks the formulation's constraints by direct simulation.
The oracle never touches the NLP machinery, which is what makes it usable as a
soundness check on the solver's infeasibility verdicts.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Tuple

import numpy as np

from . import __version__ as _pkg_version
from .controllers import (
    ControllerConfig,
    Formulation,
    constant_input_guess,
    transcribe,
)
from .model import ScalarFieldSpec, StateVec, SystemModel
from .nlp import SolverSettings, _sqp_phase, total_violation

_EXCLUDE_TOL = 1e-12
_ORACLE_SEQ_LIMIT = 10_000_000


class SizeLimitError(ValueError):
    pass


class PointStatus(IntEnum):
    FEASIBLE = 0
    INFEASIBLE = 1   # restoration converged above tolerance from every start
    EXCLUDED = 2     # outside the safe set, not sampled
    FAILED = 3       # solver trouble; counted as infeasible but flagged

    @property
    def code(self) -> str:
        return self.name.lower()


@dataclass
class FeasibilityGrid:
    axes: List[np.ndarray]
    classification: np.ndarray   # bool per point, C-order over the axes
    status: np.ndarray           # PointStatus values
    violation: np.ndarray        # certificate / witness violation per point
    solve_ms: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    def point(self, flat_index: int) -> np.ndarray:
        idx = np.unravel_index(flat_index, self.shape)
        return np.array([self.axes[d][i] for d, i in enumerate(idx)])

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def counts(self) -> dict:
        return {s.code: int(np.sum(self.status == s)) for s in PointStatus}


@dataclass
class GridComparison:
    both: int
    a_only: int
    b_only: int
    neither: int
    subset_violations: List[Tuple[int, np.ndarray]]  # feasible in A but not in B

    @property
    def total(self) -> int:
        return self.both + self.a_only + self.b_only + self.neither


def _axes_from_box(box, resolution) -> List[np.ndarray]:
    box = [tuple(map(float, b)) for b in box]
    if np.isscalar(resolution):
        resolution = [int(resolution)] * len(box)
    if len(resolution) != len(box):
        raise ValueError("resolution must be scalar or one count per axis")
    axes = []
    for (lo, hi), count in zip(box, resolution):
        if not hi >= lo:
            raise ValueError(f"empty box interval [{lo}, {hi}]")
        if count < 2:
            raise ValueError("resolution must be at least 2 per axis")
        axes.append(np.linspace(lo, hi, count))
    return axes


def _feasibility_certificate(problem, settings) -> Tuple[float, bool]:
    """Minimum L1 violation over multistart restoration plus a cleanliness flag.

    ``clean`` is False when any start aborted (non-finite callbacks or the
    iteration限) without certifying; such points are flagged FAILED instead of
    INFEASIBLE so they cannot silently corrupt set comparisons.
    """
    from .nlp import _multistart_points

    best = np.inf
    clean = True
    for z0 in _multistart_points(problem, settings):
        r = _sqp_phase(problem, z0, settings, restore=True)
        if r.failure is not None and not r.converged:
            clean = False
        best = min(best, r.viol_l1)
        if best <= settings.feas_tol:
            return float(best), True
    return float(best), clean


def classify_state(config: ControllerConfig, model: SystemModel,
                   h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
                   x_t: StateVec, settings: SolverSettings,
                   quick_witness: bool = True) -> Tuple[PointStatus, float]:
    """Feasibility classification of a single state.

    Unsafe states (h < 0) are excluded. Otherwise a handful of constant-input
    rollouts are tried as ready-made certificates before falling back to the
    restoration phase from all multistart points.
    """
    x_t = np.asarray(x_t, dtype=float)
    if h is not None and float(h.value(x_t)) < -_EXCLUDE_TOL:
        return PointStatus.EXCLUDED, np.nan
    tr = transcribe(config, model, h, V, x_t)
    if quick_witness:
        candidates = [tr.problem.initial_guess]
        for u_const in (model.input_lower, model.input_upper):
            candidates.append(constant_input_guess(tr, model, h, V, u_const))
        for z in candidates:
            v = total_violation(tr.problem, z)
            if v <= settings.feas_tol:
                return PointStatus.FEASIBLE, float(v)
    viol, clean = _feasibility_certificate(tr.problem, settings)
    if viol <= settings.feas_tol:
        return PointStatus.FEASIBLE, viol
    if not clean:
        return PointStatus.FAILED, viol
    return PointStatus.INFEASIBLE, viol


_WORKER_CTX: dict = {}


def _pool_init(payload):
    _WORKER_CTX["payload"] = payload


def _pool_classify(flat_indices):
    config, model, h, V, settings, axes, quick = _WORKER_CTX["payload"]
    shape = tuple(len(a) for a in axes)
    out = []
    for fi in flat_indices:
        idx = np.unravel_index(fi, shape)
        x = np.array([axes[d][i] for d, i in enumerate(idx)])
        tic = time.perf_counter()
        status, viol = classify_state(config, model, h, V, x, settings, quick)
        out.append((fi, int(status), viol, 1e3 * (time.perf_counter() - tic)))
    return out


def sample_grid(config: ControllerConfig, model: SystemModel,
                h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
                box, resolution, settings: Optional[SolverSettings] = None,
                jobs: int = 1, quick_witness: bool = True) -> FeasibilityGrid:
    """Classify every grid point of the box as feasible/infeasible.

    Points are visited in C order over the axes (last axis fastest); with
    ``jobs > 1`` the work is spread over a process pool and reassembled in
    point order, so results are independent of scheduling.
    """
    settings = settings or SolverSettings()
    axes = _axes_from_box(box, resolution)
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape))
    status = np.empty(total, dtype=np.int8)
    violation = np.empty(total)
    ms = np.empty(total)

    tic = time.perf_counter()
    if jobs > 1:
        payload = (config, model, h, V, settings, axes, quick_witness)
        chunks = np.array_split(np.arange(total), jobs * 4)
        with ProcessPoolExecutor(max_workers=jobs, initializer=_pool_init,
                                 initargs=(payload,)) as pool:
            for part in pool.map(_pool_classify, [c.tolist() for c in chunks]):
                for fi, st, vi, t_ms in part:
                    status[fi], violation[fi], ms[fi] = st, vi, t_ms
    else:
        for fi in range(total):
            idx = np.unravel_index(fi, shape)
            x = np.array([axes[d][i] for d, i in enumerate(idx)])
            t0 = time.perf_counter()
            st, vi = classify_state(config, model, h, V, x, settings, quick_witness)
            status[fi], violation[fi], ms[fi] = int(st), vi, 1e3 * (time.perf_counter() - t0)
    wall = time.perf_counter() - tic

    rc = config.resolve(model)
    metadata = {
        "formulation": rc.formulation.value,
        "gamma": rc.gamma.tolist(),
        "config_digest": config.digest(),
        "barrier": getattr(h, "name", None),
        "lyapunov": getattr(V, "name", None),
        "box": [[float(a[0]), float(a[-1])] for a in axes],
        "resolution": list(shape),
        "feas_tol": settings.feas_tol,
        "seed": settings.seed,
        "quick_witness": quick_witness,
        "wall_time_s": wall,
        "version": _pkg_version,
    }
    return FeasibilityGrid(axes=axes, classification=status == int(PointStatus.FEASIBLE),
                           status=status, violation=violation, solve_ms=ms,
                           metadata=metadata)


def compare(grid_a: FeasibilityGrid, grid_b: FeasibilityGrid) -> GridComparison:
    """Exact per-point set algebra; grids must share identical axes."""
    if len(grid_a.axes) != len(grid_b.axes) or any(
            not np.array_equal(a, b) for a, b in zip(grid_a.axes, grid_b.axes)):
        raise ValueError("grids have mismatched axes and cannot be compared")
    a = grid_a.classification
    b = grid_b.classification
    both = int(np.sum(a & b))
    a_only = int(np.sum(a & ~b))
    b_only = int(np.sum(~a & b))
    neither = int(np.sum(~a & ~b))
    violations = [(int(fi), grid_a.point(int(fi))) for fi in np.flatnonzero(a & ~b)]
    return GridComparison(both=both, a_only=a_only, b_only=b_only, neither=neither,
                          subset_violations=violations)


# --- brute-force oracle -------------------------------------------------------

def _oracle_horizon(rc) -> int:
    if rc.formulation is Formulation.DCLF_DCBF:
        return 1
    if rc.formulation is Formulation.MPC_CBF:
        return rc.N
    if rc.formulation is Formulation.MPC_GCBF:
        return rc.gcbf_relative_degree
    if rc.formulation in (Formulation.CBF_NMPC, Formulation.CLF_CBF_NMPC):
        return rc.M_cbf
    return 0  # CLF_NMPC: only input bounds, always satisfiable


def brute_force_feasible(config: ControllerConfig, model: SystemModel,
                         h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
                         x_t: StateVec, input_levels: int = 5) -> bool:
    """Exhaustive feasibility check on a uniform input grid.

    Simulates every input sequence over the horizon that the formulation's
    state constraints actually reach and checks those constraints directly:

    * fixed decay:   h(x_{k+1}) >= (1 - gamma_k) h(x_k) on each step
    * relative degree m: h(x_m) >= (1 - gamma)^m h(x_0)
    * relaxed decay: a feasible omega_k >= 0 exists iff h(x_{k+1}) >= 0 or
      (h(x_k) < 0 and gamma_k < 1); CLF rows are always satisfiable via slack.

    A sequence that passes is exact proof of feasibility (the input grid is a
    subset of the admissible set), so this oracle is sound in the feasible
    direction and conservative in the other.
    """
    if model.m != 1:
        raise ValueError("the enumeration oracle requires a single-input model")
    rc = config.resolve(model)
    x_t = np.asarray(x_t, dtype=float).reshape(model.n)
    T = _oracle_horizon(rc)
    check_box = model.state_lower is not None or model.state_upper is not None
    if check_box:
        if _outside_box(x_t[None, :], model).any():
            return False
        T = max(T, rc.N - 1)
    if T == 0:
        return True
    if input_levels ** T > _ORACLE_SEQ_LIMIT:
        raise SizeLimitError(
            f"{input_levels}^{T} input sequences exceed the {_ORACLE_SEQ_LIMIT:.0g} cap")

    grid = np.linspace(float(model.input_lower[0]), float(model.input_upper[0]),
                       input_levels)
    seqs = np.stack(np.meshgrid(*([grid] * T), indexing="ij"), axis=-1).reshape(-1, T)

    form = rc.formulation
    chained = form in (Formulation.MPC_CBF, Formulation.DCLF_DCBF,
                       Formulation.CBF_NMPC, Formulation.CLF_CBF_NMPC)
    h0 = float(h.value(x_t)) if h is not None else np.nan
    alive = np.arange(seqs.shape[0])
    X = np.repeat(x_t[None, :], seqs.shape[0], axis=0)
    h_prev: Optional[np.ndarray] = None  # barrier at the previous step (h0 before step 1)

    for k in range(T):
        X = model.step_many(X, seqs[alive, k][:, None])
        keep = np.ones(X.shape[0], dtype=bool)
        if check_box and k < rc.N - 1:
            keep &= ~_outside_box(X, model)
        hx = None
        prev = h0 if h_prev is None else h_prev
        if form in (Formulation.MPC_CBF, Formulation.DCLF_DCBF):
            hx = h.value_many(X)
            rate = 1.0 - float(rc.gamma[k if form is Formulation.MPC_CBF else 0])
            keep &= hx >= rate * prev
        elif form is Formulation.MPC_GCBF and k == rc.gcbf_relative_degree - 1:
            hx = h.value_many(X)
            keep &= hx >= (1.0 - float(rc.gamma[0])) ** rc.gcbf_relative_degree * h0
        elif form in (Formulation.CBF_NMPC, Formulation.CLF_CBF_NMPC) and k < rc.M_cbf:
            hx = h.value_many(X)
            ok = hx >= 0.0
            if float(rc.gamma[k]) < 1.0:
                ok = ok | (prev < 0.0)
            keep &= ok
        if not keep.all():
            X = X[keep]
            alive = alive[keep]
            hx = hx[keep] if hx is not None else None
            if alive.size == 0:
                return False
        if chained and k + 1 < T:
            h_prev = hx if hx is not None else h.value_many(X)
    return True


def _outside_box(X: np.ndarray, model: SystemModel) -> np.ndarray:
    out = np.zeros(X.shape[0], dtype=bool)
    if model.state_lower is not None:
        out |= (X < model.state_lower[None, :] - 1e-12).any(axis=1)
    if model.state_upper is not None:
        out |= (X > model.state_upper[None, :] + 1e-12).any(axis=1)
    return out
