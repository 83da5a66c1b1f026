"""Dense nonlinear programming: problem description and an SQP solver.

The solver is self-contained and sized for horizon-length MPC transcriptions
(tens of variables). Each iteration solves an elastic quadratic subproblem
(constraint linearizations with L1-penalized slacks, the classical S-L1-QP
construction) via the active-set method in :mod:`cbfmpc.qp`, followed by a
backtracking line search on the L1 merit function. The Hessian is a damped
BFGS approximation, or Gauss-Newton when the objective is declared as a sum
of squares. Infeasibility is decided by a feasibility-restoration phase
(minimize total L1 violation) run from multiple start points; a problem is
reported Infeasible only when every start converges to violation above the
feasibility tolerance, and the smallest violation found is recorded as the
certificate.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np

from .qp import solve_qp

_PENALTY_CAP = 1e8
_ALPHA_MIN = 1e-10


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class ScalarConstraint:
    """One scalar constraint with analytic gradient; inequalities mean g(z) >= 0."""

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    name: str = ""


@dataclass
class NlpProblem:
    """Dense NLP: objective with gradient, scalar constraints, box bounds.

    ``residuals``/``residual_jacobian`` optionally declare the objective as
    ``sum(r(z)**2)``; the solver then uses the Gauss-Newton Hessian ``2 J'J``
    instead of BFGS.
    """

    num_vars: int
    objective: Callable[[np.ndarray], float]
    objective_grad: Callable[[np.ndarray], np.ndarray]
    eq_constraints: List[ScalarConstraint] = field(default_factory=list)
    ineq_constraints: List[ScalarConstraint] = field(default_factory=list)
    var_lower: Optional[np.ndarray] = None
    var_upper: Optional[np.ndarray] = None
    initial_guess: Optional[np.ndarray] = None
    residuals: Optional[Callable[[np.ndarray], np.ndarray]] = None
    residual_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        n = self.num_vars
        self.var_lower = (np.full(n, -np.inf) if self.var_lower is None
                          else np.asarray(self.var_lower, dtype=float).reshape(n))
        self.var_upper = (np.full(n, np.inf) if self.var_upper is None
                          else np.asarray(self.var_upper, dtype=float).reshape(n))
        if np.any(self.var_lower > self.var_upper):
            raise ValueError("var_lower must be <= var_upper componentwise")
        if self.initial_guess is None:
            self.initial_guess = np.clip(np.zeros(n), self.var_lower, self.var_upper)
        else:
            self.initial_guess = np.asarray(self.initial_guess, dtype=float).reshape(n)
            if not np.all(np.isfinite(self.initial_guess)):
                raise ValueError("initial_guess must be finite")


@dataclass(frozen=True)
class SolverSettings:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_iterations: int = 200
    merit_growth: float = 10.0
    multistart_count: int = 3
    seed: int = 0
    verbose: bool = False

    def __post_init__(self):
        if self.feas_tol <= 0 or self.opt_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.merit_growth <= 1:
            raise ValueError("merit_growth must exceed 1")


@dataclass
class SolveResult:
    status: SolveStatus
    z_opt: np.ndarray
    objective_value: float
    max_constraint_violation: float
    kkt_residual: float
    iterations: int
    wall_time: float
    lam_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nu_bound: np.ndarray = field(default_factory=lambda: np.zeros(0))
    infeasibility_certificate: Optional[float] = None


class _NonFinite(Exception):
    pass


@dataclass
class _Eval:
    z: np.ndarray
    f: float
    gf: np.ndarray
    e: np.ndarray
    E: np.ndarray
    g: np.ndarray
    G: np.ndarray


def _finite(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(a)):
        raise _NonFinite
    return a


def _values(problem: NlpProblem, z: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    f = float(_finite(problem.objective(z)))
    e = np.array([_finite(c.value(z)) for c in problem.eq_constraints], dtype=float).reshape(-1)
    g = np.array([_finite(c.value(z)) for c in problem.ineq_constraints], dtype=float).reshape(-1)
    return f, e, g


def _full_eval(problem: NlpProblem, z: np.ndarray) -> _Eval:
    f, e, g = _values(problem, z)
    gf = _finite(problem.objective_grad(z)).reshape(problem.num_vars)
    E = (np.vstack([_finite(c.gradient(z)).reshape(problem.num_vars)
                    for c in problem.eq_constraints])
         if problem.eq_constraints else np.zeros((0, problem.num_vars)))
    G = (np.vstack([_finite(c.gradient(z)).reshape(problem.num_vars)
                    for c in problem.ineq_constraints])
         if problem.ineq_constraints else np.zeros((0, problem.num_vars)))
    return _Eval(z=z, f=f, gf=gf, e=e, E=E, g=g, G=G)


def _viol_l1(e: np.ndarray, g: np.ndarray) -> float:
    return float(np.sum(np.abs(e)) + np.sum(np.maximum(0.0, -g)))


def _viol_inf(e: np.ndarray, g: np.ndarray) -> float:
    v = 0.0
    if e.size:
        v = float(np.max(np.abs(e)))
    if g.size:
        v = max(v, float(np.max(np.maximum(0.0, -g))))
    return v


def total_violation(problem: NlpProblem, z: np.ndarray) -> float:
    """L1 violation of all constraints plus box bounds at an arbitrary point."""
    z = np.asarray(z, dtype=float)
    try:
        _, e, g = _values(problem, z)
    except _NonFinite:
        return np.inf
    bound = float(np.sum(np.maximum(0.0, problem.var_lower - z))
                  + np.sum(np.maximum(0.0, z - problem.var_upper)))
    return _viol_l1(e, g) + bound


@dataclass
class _PhaseResult:
    converged: bool  # reached a KKT point (optimize) or a violation minimum (restore)
    z: np.ndarray
    viol_l1: float
    viol_inf: float
    f: float
    kkt: float
    iterations: int
    mu: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    failure: Optional[SolveStatus] = None


_RESTORE_SIGMA0 = 1e-4   # initial proximal weight of the restoration subproblems
_RESTORE_SIGMA_MIN = 1e-8
_RESTORE_SIGMA_MAX = 1e2


def _hessian_init(problem: NlpProblem, z: np.ndarray, restore: bool) -> np.ndarray:
    n = problem.num_vars
    if restore:
        return _RESTORE_SIGMA0 * np.eye(n)
    if problem.residuals is not None:
        J = _finite(problem.residual_jacobian(z))
        return 2.0 * (J.T @ J)
    return np.eye(n)


def _sqp_phase(problem: NlpProblem, z0: np.ndarray, settings: SolverSettings,
               restore: bool) -> _PhaseResult:
    """Core S-L1-QP loop. With ``restore`` the objective is dropped and the
    loop minimizes the L1 constraint violation (feasibility restoration)."""
    n = problem.num_vars
    lb, ub = problem.var_lower, problem.var_upper
    z = np.clip(np.asarray(z0, dtype=float), lb, ub)
    nE = len(problem.eq_constraints)
    nG = len(problem.ineq_constraints)
    mu = np.zeros(nE)
    lam = np.zeros(nG)
    nu = np.zeros(n)
    kkt = np.inf

    def make_result(converged, ev, failure=None, iters=0):
        return _PhaseResult(converged=converged, z=ev.z, viol_l1=_viol_l1(ev.e, ev.g),
                            viol_inf=_viol_inf(ev.e, ev.g), f=ev.f, kkt=kkt,
                            iterations=iters, mu=mu, lam=lam, nu=nu, failure=failure)

    try:
        ev = _full_eval(problem, z)
    except _NonFinite:
        dummy = _Eval(z=z, f=np.inf, gf=np.zeros(n), e=np.zeros(nE), E=np.zeros((nE, n)),
                      g=np.zeros(nG), G=np.zeros((nG, n)))
        return make_result(False, dummy, failure=SolveStatus.NUMERICAL_FAILURE)

    try:
        B = _hessian_init(problem, z, restore)
    except _NonFinite:
        return make_result(False, ev, failure=SolveStatus.NUMERICAL_FAILURE)

    penalty = 1.0 if restore else max(10.0, 2.0 * float(np.linalg.norm(ev.gf, np.inf)))
    act_hint = fixed_hint = None
    bfgs_reset = True
    no_progress = 0
    prev_f, prev_vl1 = None, None
    merit_hist: List[Tuple[float, float]] = []
    sigma = _RESTORE_SIGMA0  # proximal weight, adapted like a trust region

    for it in range(1, settings.max_iterations + 1):
        vl1 = _viol_l1(ev.e, ev.g)
        vinf = _viol_inf(ev.e, ev.g)
        if restore and vl1 <= settings.feas_tol:
            return make_result(True, ev, iters=it - 1)
        if prev_f is not None:
            improved = prev_vl1 - vl1 > 1e-10 * (1.0 + prev_vl1)
            if not restore:
                improved = improved or prev_f - ev.f > 1e-10 * (1.0 + abs(prev_f))
            no_progress = 0 if improved else no_progress + 1
            if no_progress >= 4:
                return make_result(restore, ev, iters=it - 1)
        prev_f, prev_vl1 = ev.f, vl1

        # elastic QP: variables (dz, p, q, t); eq rows E dz - p + q = -e,
        # ineq rows G dz + t >= -g, elastic slacks penalized at `penalty`.
        nel = n + 2 * nE + nG
        gf = np.zeros(n) if restore else ev.gf
        for _ in range(4):
            H = np.zeros((nel, nel))
            H[:n, :n] = B
            c = np.concatenate([gf, np.full(2 * nE + nG, penalty)])
            A_eq = np.hstack([ev.E, -np.eye(nE), np.eye(nE), np.zeros((nE, nG))])
            A_in = np.hstack([ev.G, np.zeros((nG, 2 * nE)), np.eye(nG)])
            lo = np.concatenate([lb - z, np.zeros(2 * nE + nG)])
            hi = np.concatenate([ub - z, np.full(2 * nE + nG, np.inf)])
            w0 = np.concatenate([np.zeros(n), np.maximum(ev.e, 0.0),
                                 np.maximum(-ev.e, 0.0), np.maximum(-ev.g, 0.0)])
            qp = solve_qp(H, c, A_eq, -ev.e, A_in, -ev.g, lo, hi, w0,
                          act_hint=act_hint, fixed_hint=fixed_hint)
            mult_max = max(
                float(np.max(np.abs(qp.mu_eq))) if nE else 0.0,
                float(np.max(qp.lam_in)) if nG else 0.0,
            )
            if restore or mult_max < 0.999 * penalty or penalty >= _PENALTY_CAP:
                break
            penalty = min(penalty * settings.merit_growth, _PENALTY_CAP)
        act_hint, fixed_hint = qp.active_ineq, qp.fixed

        if qp.status in ("singular", "unbounded"):
            if not restore and not bfgs_reset:
                B = np.eye(n)
                bfgs_reset = True
                continue
            # treat degraded subproblems as a stall; the driver decides via
            # restoration whether the system is actually infeasible
            return make_result(False, ev, iters=it)

        dz = qp.w[:n]
        slack_sum = float(np.sum(qp.w[n:]))
        mu, lam, nu = qp.mu_eq.copy(), qp.lam_in.copy(), qp.nu_bound[:n].copy()

        # KKT test at the current iterate with the QP multiplier estimates
        stat = ev.gf - (ev.E.T @ mu if nE else 0.0) - (ev.G.T @ lam if nG else 0.0) - nu
        comp = float(np.max(np.abs(lam * ev.g))) if nG else 0.0
        kkt = max(float(np.linalg.norm(stat, np.inf)), comp)
        if not restore and vinf <= settings.feas_tol and kkt <= settings.opt_tol:
            return make_result(True, ev, iters=it)

        pred_viol_drop = vl1 - slack_sum
        if restore and pred_viol_drop <= 1e-9 * max(1.0, vl1) and sigma <= 1e-3:
            return make_result(True, ev, iters=it)  # local minimum of the violation
        if not restore and vl1 > settings.feas_tol and pred_viol_drop <= 1e-8 * max(1.0, vl1):
            # the linearized constraints stay violated even with the penalty
            # maxed out: hand over to the restoration phase
            return make_result(False, ev, iters=it)

        merit0 = (0.0 if restore else ev.f) + penalty * vl1
        if restore:
            merit_ref = merit0  # restoration stays monotone in the violation
        else:
            # non-monotone (watchdog) acceptance: comparing against the worst
            # recent merit lets full steps through where the L1 penalty would
            # otherwise reject them for second-order constraint violation
            # (Maratos effect)
            merit_hist.append((ev.f, vl1))
            del merit_hist[:-4]
            merit_ref = max(mf + penalty * mv for mf, mv in merit_hist)
        descent = (0.0 if restore else float(ev.gf @ dz)) - penalty * pred_viol_drop
        alpha = 1.0
        accepted = None
        while alpha >= _ALPHA_MIN:
            zt = np.clip(z + alpha * dz, lb, ub)
            try:
                ft, et, gt = _values(problem, zt)
            except _NonFinite:
                alpha *= 0.5
                continue
            merit_t = (0.0 if restore else ft) + penalty * _viol_l1(et, gt)
            if merit_t <= merit_ref + 1e-4 * alpha * min(descent, 0.0) + 1e-14 * abs(merit_ref):
                accepted = zt
                break
            alpha *= 0.5
        if settings.verbose:
            print(f"sqp[{'R' if restore else 'O'}] it={it} merit={merit0:.6e} "
                  f"viol={vl1:.3e} kkt={kkt:.3e} alpha={alpha:.2e}", file=sys.stderr)
        if accepted is None:
            # merit stall: restoration treats this as its minimum, the optimize
            # phase hands control back to the driver (restoration + resume)
            return make_result(restore, ev, iters=it)

        try:
            ev_new = _full_eval(problem, accepted)
        except _NonFinite:
            return make_result(False, ev, failure=SolveStatus.NUMERICAL_FAILURE, iters=it)

        if restore:
            # Levenberg-style proximal adaptation: confident full steps relax
            # the damping, rejected curvature tightens it
            if alpha >= 1.0:
                sigma = max(sigma / 3.0, _RESTORE_SIGMA_MIN)
            elif alpha < 0.25:
                sigma = min(sigma * 10.0, _RESTORE_SIGMA_MAX)
            B = sigma * np.eye(n)
        if not restore:
            if problem.residuals is not None:
                try:
                    J = _finite(problem.residual_jacobian(accepted))
                except _NonFinite:
                    return make_result(False, ev, failure=SolveStatus.NUMERICAL_FAILURE, iters=it)
                B = 2.0 * (J.T @ J)
            else:
                s = ev_new.z - ev.z
                gl_new = ev_new.gf - (ev_new.E.T @ mu if nE else 0.0) - (ev_new.G.T @ lam if nG else 0.0)
                gl_old = ev.gf - (ev.E.T @ mu if nE else 0.0) - (ev.G.T @ lam if nG else 0.0)
                y = gl_new - gl_old
                Bs = B @ s
                sBs = float(s @ Bs)
                sy = float(s @ y)
                if sBs <= 1e-14:
                    B = np.eye(n)
                    bfgs_reset = True
                else:
                    if sy < 0.2 * sBs:  # Powell damping
                        theta = 0.8 * sBs / (sBs - sy)
                        y = theta * y + (1.0 - theta) * Bs
                        sy = float(s @ y)
                    if sy <= 1e-14:
                        B = np.eye(n)
                        bfgs_reset = True
                    else:
                        B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
                        bfgs_reset = False
        ev = ev_new
        z = ev.z

    return make_result(False, ev, failure=SolveStatus.ITERATION_LIMIT,
                       iters=settings.max_iterations)


def _multistart_points(problem: NlpProblem, settings: SolverSettings) -> List[np.ndarray]:
    lb, ub = problem.var_lower, problem.var_upper
    starts = [np.clip(problem.initial_guess, lb, ub)]
    if settings.multistart_count >= 2:
        starts.append(np.clip(np.zeros(problem.num_vars), lb, ub))
    rng = np.random.default_rng(settings.seed)
    for _ in range(max(0, settings.multistart_count - 2)):
        lo = np.where(np.isfinite(lb), lb, np.where(np.isfinite(ub), ub - 2.0, -1.0))
        hi = np.where(np.isfinite(ub), ub, np.where(np.isfinite(lb), lb + 2.0, 1.0))
        starts.append(rng.uniform(lo, hi))
    return starts


def feasibility_phase(problem: NlpProblem, settings: SolverSettings) -> Tuple[float, np.ndarray]:
    """Minimize the total L1 constraint violation from every multistart point.

    Returns the smallest violation found and the point attaining it; a value
    at or below ``feas_tol`` certifies feasibility of the constraint system
    and short-circuits the remaining starts.
    """
    best_v, best_z = np.inf, np.clip(problem.initial_guess, problem.var_lower,
                                     problem.var_upper)
    for z0 in _multistart_points(problem, settings):
        r = _sqp_phase(problem, z0, settings, restore=True)
        if r.viol_l1 < best_v:
            best_v, best_z = r.viol_l1, r.z
        if best_v <= settings.feas_tol:
            break
    return float(best_v), best_z


def solve(problem: NlpProblem, settings: Optional[SolverSettings] = None) -> SolveResult:
    """SQP solve with feasibility restoration and multistart infeasibility detection.

    The main phase runs from the problem's initial guess. If it fails to reach
    a KKT point, the restoration phase searches for a feasible witness from all
    multistart points; Infeasible is reported only when every start converges
    to violation above ``feas_tol``, otherwise the main phase resumes from the
    witness.
    """
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    iters = 0

    def result(status, phase: _PhaseResult, certificate=None) -> SolveResult:
        return SolveResult(
            status=status,
            z_opt=phase.z,
            objective_value=phase.f,
            max_constraint_violation=phase.viol_inf,
            kkt_residual=phase.kkt,
            iterations=iters,
            wall_time=time.perf_counter() - t0,
            lam_ineq=phase.lam,
            mu_eq=phase.mu,
            nu_bound=phase.nu,
            infeasibility_certificate=certificate,
        )

    first = _sqp_phase(problem, problem.initial_guess, settings, restore=False)
    iters += first.iterations
    if first.converged:
        return result(SolveStatus.OPTIMAL, first)
    if first.failure == SolveStatus.NUMERICAL_FAILURE:
        return result(SolveStatus.NUMERICAL_FAILURE, first)

    min_viol, witness = feasibility_phase(problem, settings)
    if min_viol > settings.feas_tol:
        phase = _PhaseResult(converged=False, z=witness, viol_l1=min_viol,
                             viol_inf=min_viol, f=np.inf, kkt=np.inf, iterations=0,
                             mu=np.zeros(len(problem.eq_constraints)),
                             lam=np.zeros(len(problem.ineq_constraints)),
                             nu=np.zeros(problem.num_vars))
        try:
            phase.f, e, g = _values(problem, witness)
            phase.viol_inf = _viol_inf(e, g)
        except _NonFinite:
            pass
        return result(SolveStatus.INFEASIBLE, phase, certificate=min_viol)

    second = _sqp_phase(problem, witness, settings, restore=False)
    iters += second.iterations
    if second.converged:
        return result(SolveStatus.OPTIMAL, second)
    status = second.failure or SolveStatus.ITERATION_LIMIT
    return result(status, second)


@dataclass
class DerivativeReport:
    max_rel_error: float
    worst: str
    per_callback: dict


def check_derivatives(problem: NlpProblem, point: np.ndarray,
                      rel_step: float = 1e-6) -> DerivativeReport:
    """Compare every analytic gradient against central finite differences."""
    from .model import finite_difference_gradient

    point = np.asarray(point, dtype=float)
    entries = [("objective", problem.objective, problem.objective_grad)]
    entries += [(c.name or f"eq[{i}]", c.value, c.gradient)
                for i, c in enumerate(problem.eq_constraints)]
    entries += [(c.name or f"ineq[{i}]", c.value, c.gradient)
                for i, c in enumerate(problem.ineq_constraints)]
    report = {}
    worst_name, worst_err = "", 0.0
    for name, fval, fgrad in entries:
        g = np.asarray(fgrad(point), dtype=float).reshape(problem.num_vars)
        g_fd = finite_difference_gradient(lambda zz: float(fval(zz)), point, rel_step)
        err = float(np.linalg.norm(g - g_fd, np.inf)) / max(1.0, float(np.linalg.norm(g_fd, np.inf)))
        report[name] = err
        if err >= worst_err:
            worst_name, worst_err = name, err
    return DerivativeReport(max_rel_error=worst_err, worst=worst_name, per_callback=report)
