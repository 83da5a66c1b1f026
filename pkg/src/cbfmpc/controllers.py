"""Receding-horizon controller formulations built on discrete-time CBFs/CLFs.

Six formulations are transcribed into dense NLPs:

* ``DCLF_DCBF``      one-step min-norm control with a CLF decrease constraint
  (slacked) and a fixed-decay CBF constraint.
* ``MPC_CBF``        horizon-N tracking MPC with the fixed-decay constraint
  ``h(x_{k+1}) >= (1 - gamma_k) h(x_k)`` on every step.
* ``MPC_GCBF``       same MPC with a single constraint between step 0 and the
  relative-degree step: ``h(x_m) >= (1 - gamma)^m h(x_0)``.
* ``CLF_NMPC``       tracking MPC with slacked CLF decrease constraints and no
  barrier.
* ``CBF_NMPC``       decay-rate-relaxed barrier constraints
  ``h(x_{k+1}) >= omega_k (1 - gamma_k) h(x_k), omega_k >= 0`` over the first
  M_cbf steps, Lyapunov terminal cost ``beta V(x_N)``, penalty ``psi(omega_k)``.
* ``CLF_CBF_NMPC``   relaxed barrier constraints plus slacked CLF constraints,
  penalties on both relaxations, no terminal cost.

Multi-step formulations use explicit multiple shooting: predicted states are
decision variables tied by per-step dynamics equalities. The one-step
DCLF-DCBF substitutes the model step directly and optimizes ``(u, s)`` only.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Optional

import numpy as np

from .model import ScalarFieldSpec, StateVec, SystemModel
from .nlp import (
    NlpProblem,
    ScalarConstraint,
    SolveResult,
    SolveStatus,
    SolverSettings,
    solve,
)


class Formulation(str, Enum):
    DCLF_DCBF = "DCLF_DCBF"
    MPC_CBF = "MPC_CBF"
    MPC_GCBF = "MPC_GCBF"
    CLF_NMPC = "CLF_NMPC"
    CBF_NMPC = "CBF_NMPC"
    CLF_CBF_NMPC = "CLF_CBF_NMPC"


class InvalidConfigurationError(ValueError):
    pass


RELAXED = {Formulation.CBF_NMPC, Formulation.CLF_CBF_NMPC}

# Upper bound on the decay-rate relaxation variables. The formulations only
# require omega_k >= 0; from a safe state (h >= 0) exact feasibility never
# needs omega_k > 1, so this cap does not change the feasible state set. It
# does keep the restoration phase away from the unattained infimum where an
# unbounded omega amplifies a vanishing barrier violation.
OMEGA_MAX = 10.0
WITH_BARRIER = {Formulation.DCLF_DCBF, Formulation.MPC_CBF, Formulation.MPC_GCBF,
                Formulation.CBF_NMPC, Formulation.CLF_CBF_NMPC}
WITH_CLF = {Formulation.DCLF_DCBF, Formulation.CLF_NMPC, Formulation.CLF_CBF_NMPC}

# Parameters each formulation consumes. Setting anything outside this set is
# rejected rather than ignored.
_USED_FIELDS = {
    Formulation.DCLF_DCBF: {"gamma", "alpha", "H_input", "P_slack"},
    Formulation.MPC_CBF: {"N", "gamma", "Q", "R", "P_terminal", "goal_state"},
    Formulation.MPC_GCBF: {"N", "gamma", "gcbf_relative_degree", "Q", "R",
                           "P_terminal", "goal_state"},
    Formulation.CLF_NMPC: {"N", "alpha", "M_clf", "Q", "R", "P_slack", "goal_state"},
    Formulation.CBF_NMPC: {"N", "gamma", "M_cbf", "beta", "Q", "R", "P_omega",
                           "goal_state"},
    Formulation.CLF_CBF_NMPC: {"N", "gamma", "alpha", "M_cbf", "M_clf", "Q", "R",
                               "P_omega", "P_slack", "goal_state"},
}


@dataclass(frozen=True)
class ControllerConfig:
    """Formulation selector plus hyperparameters; unset fields take defaults.

    ``gamma``/``alpha`` accept a scalar (held constant across the horizon) or
    a per-step sequence. Fields a formulation does not use must stay unset.
    """

    formulation: Formulation
    N: Optional[int] = None
    M_cbf: Optional[int] = None
    M_clf: Optional[int] = None
    gamma: Optional[object] = None
    alpha: Optional[object] = None
    beta: Optional[float] = None
    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    P_terminal: Optional[np.ndarray] = None
    P_omega: Optional[float] = None
    P_slack: Optional[float] = None
    H_input: Optional[np.ndarray] = None
    gcbf_relative_degree: Optional[int] = None
    goal_state: Optional[np.ndarray] = None

    def resolve(self, model: SystemModel) -> "ResolvedConfig":
        return _resolve(self, model)

    def digest(self) -> str:
        """Stable hash of the configuration for experiment manifests."""
        payload = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Formulation):
                v = v.value
            elif isinstance(v, np.ndarray):
                v = v.tolist()
            payload[f.name] = v
        blob = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ResolvedConfig:
    formulation: Formulation
    N: int
    M_cbf: int              # 0 when the formulation has no barrier relaxation
    M_clf: int              # 0 when there are no CLF slack variables
    gamma: np.ndarray       # per constrained step (empty if unused)
    alpha: np.ndarray
    beta: float
    Q: np.ndarray
    R: np.ndarray
    P_terminal: np.ndarray
    P_omega: float
    P_slack: float
    H_input: np.ndarray
    gcbf_relative_degree: int
    goal_state: np.ndarray


def _as_weight(value, size: int, name: str) -> np.ndarray:
    W = np.asarray(value, dtype=float)
    if W.ndim == 0:
        W = float(W) * np.eye(size)
    elif W.ndim == 1:
        if W.size != size:
            raise InvalidConfigurationError(f"{name} diagonal must have length {size}")
        W = np.diag(W)
    if W.shape != (size, size):
        raise InvalidConfigurationError(f"{name} must be {size}x{size}, got {W.shape}")
    if not np.allclose(W, W.T, atol=1e-10):
        raise InvalidConfigurationError(f"{name} must be symmetric")
    return W


def _require_psd(W: np.ndarray, name: str) -> None:
    eigs = np.linalg.eigvalsh(W)
    if eigs.min() < -1e-10:
        raise InvalidConfigurationError(f"{name} must be positive semidefinite")


def _require_pd(W: np.ndarray, name: str) -> None:
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise InvalidConfigurationError(f"{name} must be positive definite") from None


def _rate_schedule(value, count: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size == 1:
        arr = np.full(count, float(arr[0]))
    if arr.size != count:
        raise InvalidConfigurationError(
            f"{name} must be a scalar or have one entry per constrained step "
            f"({count}), got {arr.size}")
    if np.any(arr <= 0.0) or np.any(arr > 1.0):
        raise InvalidConfigurationError(f"{name} must lie in (0, 1]")
    return arr


def _resolve(cfg: ControllerConfig, model: SystemModel) -> ResolvedConfig:
    form = Formulation(cfg.formulation)
    used = _USED_FIELDS[form]
    for f in fields(cfg):
        if f.name == "formulation":
            continue
        if getattr(cfg, f.name) is not None and f.name not in used:
            raise InvalidConfigurationError(
                f"{form.value} does not use parameter {f.name!r}; leave it unset")

    N = 1 if form is Formulation.DCLF_DCBF else int(cfg.N if cfg.N is not None else 8)
    if N < 1:
        raise InvalidConfigurationError("N must be at least 1")

    if form in RELAXED:
        M_cbf = int(cfg.M_cbf) if cfg.M_cbf is not None else N
        if not 1 <= M_cbf <= N:
            raise InvalidConfigurationError("M_cbf must satisfy 1 <= M_cbf <= N")
    else:
        M_cbf = 0

    if form is Formulation.DCLF_DCBF:
        M_clf = 1
    elif form in (Formulation.CLF_NMPC, Formulation.CLF_CBF_NMPC):
        M_clf = int(cfg.M_clf) if cfg.M_clf is not None else N
        if not 1 <= M_clf <= N:
            raise InvalidConfigurationError("M_clf must satisfy 1 <= M_clf <= N")
    else:
        M_clf = 0

    n_cbf_rates = {Formulation.DCLF_DCBF: 1, Formulation.MPC_CBF: N,
                   Formulation.MPC_GCBF: 1, Formulation.CBF_NMPC: M_cbf,
                   Formulation.CLF_CBF_NMPC: M_cbf}.get(form, 0)
    if n_cbf_rates:
        if cfg.gamma is None:
            raise InvalidConfigurationError(f"{form.value} requires gamma")
        gamma = _rate_schedule(cfg.gamma, n_cbf_rates, "gamma")
    else:
        gamma = np.zeros(0)

    if form in WITH_CLF:
        if cfg.alpha is None:
            raise InvalidConfigurationError(f"{form.value} requires alpha")
        alpha = _rate_schedule(cfg.alpha, M_clf, "alpha")
    else:
        alpha = np.zeros(0)

    n = model.n
    Q = _as_weight(cfg.Q, n, "Q") if cfg.Q is not None else np.diag(
        [10.0] + [1.0] * (n - 1))
    _require_psd(Q, "Q")
    R = _as_weight(cfg.R, model.m, "R") if cfg.R is not None else np.eye(model.m)
    _require_pd(R, "R")
    P_terminal = (_as_weight(cfg.P_terminal, n, "P_terminal")
                  if cfg.P_terminal is not None else 10.0 * Q)
    _require_psd(P_terminal, "P_terminal")
    H_input = (_as_weight(cfg.H_input, model.m, "H_input")
               if cfg.H_input is not None else np.eye(model.m))
    _require_pd(H_input, "H_input")

    beta = float(cfg.beta) if cfg.beta is not None else 10.0
    if beta < 0:
        raise InvalidConfigurationError("beta must be nonnegative")
    P_omega = float(cfg.P_omega) if cfg.P_omega is not None else 1000.0
    P_slack = float(cfg.P_slack) if cfg.P_slack is not None else 1000.0
    if P_omega <= 0 or P_slack <= 0:
        raise InvalidConfigurationError("penalty weights must be positive")

    m_rel = int(cfg.gcbf_relative_degree) if cfg.gcbf_relative_degree is not None else 1
    if form is Formulation.MPC_GCBF and not 1 <= m_rel <= N:
        raise InvalidConfigurationError("gcbf_relative_degree must satisfy 1 <= m <= N")

    goal = (np.asarray(cfg.goal_state, dtype=float).reshape(-1)
            if cfg.goal_state is not None else np.zeros(n))
    if goal.size != n:
        raise InvalidConfigurationError(f"goal_state must have length {n}")

    return ResolvedConfig(formulation=form, N=N, M_cbf=M_cbf, M_clf=M_clf,
                          gamma=gamma, alpha=alpha, beta=beta, Q=Q, R=R,
                          P_terminal=P_terminal, P_omega=P_omega, P_slack=P_slack,
                          H_input=H_input, gcbf_relative_degree=m_rel,
                          goal_state=goal)


def penalty_psi(omega: float, P_omega: float) -> float:
    """Relaxation penalty psi(omega) = P_omega (omega - 1)^2."""
    if P_omega <= 0:
        raise ValueError("P_omega must be positive")
    return float(P_omega) * (float(omega) - 1.0) ** 2


def penalty_phi(s: float, P_slack: float) -> float:
    """CLF slack penalty phi(s) = P_slack s^2."""
    if P_slack <= 0:
        raise ValueError("P_slack must be positive")
    return float(P_slack) * float(s) ** 2


@dataclass(frozen=True)
class VarLayout:
    """Index map for the decision vector.

    Multi-step transcriptions order blocks as inputs u_0..u_{N-1}, states
    x_1..x_N, relaxation variables omega_0..omega_{M_cbf-1}, then CLF slacks
    s_0..s_{M_clf-1}. DCLF-DCBF has no state block (the one-step prediction is
    substituted directly) and its vector is just (u, s).
    """

    n: int
    m: int
    N: int
    M_cbf: int
    M_clf: int
    explicit_states: bool

    @property
    def num_vars(self) -> int:
        return (self.N * self.m + (self.N * self.n if self.explicit_states else 0)
                + self.M_cbf + self.M_clf)

    def u_slice(self, k: int) -> slice:
        return slice(k * self.m, (k + 1) * self.m)

    def x_slice(self, k: int) -> slice:
        # predicted state x_k for k = 1..N
        base = self.N * self.m
        return slice(base + (k - 1) * self.n, base + k * self.n)

    @property
    def omega_slice(self) -> slice:
        base = self.N * self.m + (self.N * self.n if self.explicit_states else 0)
        return slice(base, base + self.M_cbf)

    @property
    def slack_slice(self) -> slice:
        s = self.omega_slice
        return slice(s.stop, s.stop + self.M_clf)

    def inputs(self, z: np.ndarray) -> np.ndarray:
        return z[: self.N * self.m].reshape(self.N, self.m)

    def states(self, z: np.ndarray) -> Optional[np.ndarray]:
        if not self.explicit_states:
            return None
        base = self.N * self.m
        return z[base: base + self.N * self.n].reshape(self.N, self.n)

    def omegas(self, z: np.ndarray) -> np.ndarray:
        return z[self.omega_slice].copy()

    def slacks(self, z: np.ndarray) -> np.ndarray:
        return z[self.slack_slice].copy()


@dataclass
class Transcription:
    problem: NlpProblem
    layout: VarLayout
    resolved: ResolvedConfig
    x_t: np.ndarray


@dataclass
class ControlDecision:
    u_applied: Optional[np.ndarray]
    status: SolveStatus
    objective: float
    omega_opt: Optional[np.ndarray]
    slack_opt: Optional[np.ndarray]
    predicted_open_loop: Optional[np.ndarray]
    result: SolveResult


def _sqrt_psd(W: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(W)
    return vecs @ np.diag(np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def _require_field(form: Formulation, name: str, f: Optional[ScalarFieldSpec],
                   expected_kind: str) -> ScalarFieldSpec:
    if f is None:
        raise InvalidConfigurationError(f"{form.value} requires a {expected_kind} field")
    return f


def transcribe(config: ControllerConfig, model: SystemModel,
               h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
               x_t: StateVec) -> Transcription:
    """Build the NLP for one receding-horizon solve at the current state."""
    rc = config.resolve(model)
    x_t = np.asarray(x_t, dtype=float).reshape(model.n)
    if not np.all(np.isfinite(x_t)):
        raise ValueError("x_t must be finite")
    if rc.formulation in WITH_BARRIER:
        h = _require_field(rc.formulation, "h", h, "barrier")
    needs_V = rc.formulation in WITH_CLF or rc.formulation is Formulation.CBF_NMPC
    if needs_V:
        V = _require_field(rc.formulation, "V", V, "Lyapunov")

    if rc.formulation is Formulation.DCLF_DCBF:
        return _transcribe_dclf_dcbf(rc, model, h, V, x_t)
    return _transcribe_multistep(rc, model, h, V, x_t)


def _transcribe_dclf_dcbf(rc: ResolvedConfig, model: SystemModel,
                          h: ScalarFieldSpec, V: ScalarFieldSpec,
                          x_t: np.ndarray) -> Transcription:
    m = model.m
    layout = VarLayout(n=model.n, m=m, N=1, M_cbf=0, M_clf=1, explicit_states=False)
    gamma = float(rc.gamma[0])
    alpha = float(rc.alpha[0])
    h0 = h(x_t)
    V0 = V(x_t)

    def step(z):
        return model.step_map(x_t, z[:m])

    def cbf_val(z):
        return float(h.value(step(z))) - (1.0 - gamma) * h0

    def cbf_grad(z):
        g = np.zeros(m + 1)
        x1 = step(z)
        g[:m] = np.asarray(model.jac_u(x_t, z[:m])).T @ np.asarray(h.gradient(x1))
        return g

    def clf_val(z):
        return float(z[m]) + (1.0 - alpha) * V0 - float(V.value(step(z)))

    def clf_grad(z):
        g = np.zeros(m + 1)
        x1 = step(z)
        g[:m] = -np.asarray(model.jac_u(x_t, z[:m])).T @ np.asarray(V.gradient(x1))
        g[m] = 1.0
        return g

    # objective u'Hu + P_slack s^2 as stacked linear residuals
    LH = _sqrt_psd(rc.H_input)
    Rmat = np.zeros((m + 1, m + 1))
    Rmat[:m, :m] = LH
    Rmat[m, m] = np.sqrt(rc.P_slack)
    rvec = np.zeros(m + 1)
    problem = _least_squares_problem(Rmat, rvec, m + 1)
    problem.eq_constraints = []
    problem.ineq_constraints = [
        ScalarConstraint(cbf_val, cbf_grad, "cbf[0]"),
        ScalarConstraint(clf_val, clf_grad, "clf[0]"),
    ]
    problem.var_lower = np.concatenate([model.input_lower, [-np.inf]])
    problem.var_upper = np.concatenate([model.input_upper, [np.inf]])
    u0 = np.clip(np.zeros(m), model.input_lower, model.input_upper)
    s0 = max(0.0, float(V.value(model.step_map(x_t, u0))) - (1.0 - alpha) * V0)
    problem.initial_guess = np.concatenate([u0, [s0]])
    return Transcription(problem=problem, layout=layout, resolved=rc, x_t=x_t)


def _least_squares_problem(Rmat: np.ndarray, rvec: np.ndarray, nv: int) -> NlpProblem:
    RtR2 = 2.0 * Rmat.T @ Rmat
    Rtr2 = 2.0 * Rmat.T @ rvec
    const = float(rvec @ rvec)

    def objective(z, _M=Rmat, _v=rvec):
        r = _M @ z + _v
        return float(r @ r)

    def gradient(z, _A=RtR2, _b=Rtr2):
        return _A @ z + _b

    return NlpProblem(
        num_vars=nv,
        objective=objective,
        objective_grad=gradient,
        residuals=lambda z, _M=Rmat, _v=rvec: _M @ z + _v,
        residual_jacobian=lambda z, _M=Rmat: _M,
    )


def _transcribe_multistep(rc: ResolvedConfig, model: SystemModel,
                          h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
                          x_t: np.ndarray) -> Transcription:
    form = rc.formulation
    n, m, N = model.n, model.m, rc.N
    layout = VarLayout(n=n, m=m, N=N, M_cbf=rc.M_cbf, M_clf=rc.M_clf,
                       explicit_states=True)
    nv = layout.num_vars

    def xk_of(z, k):
        return x_t if k == 0 else z[layout.x_slice(k)]

    # dynamics equalities x_{k+1} = f(x_k, u_k), one scalar row per component
    eqs = []
    for k in range(N):
        for i in range(n):
            def dyn_val(z, k=k, i=i):
                return float(z[layout.x_slice(k + 1)][i]
                             - model.step_map(xk_of(z, k), z[layout.u_slice(k)])[i])

            def dyn_grad(z, k=k, i=i):
                g = np.zeros(nv)
                g[layout.x_slice(k + 1).start + i] = 1.0
                xk = xk_of(z, k)
                uk = z[layout.u_slice(k)]
                if k > 0:
                    g[layout.x_slice(k)] = -np.asarray(model.jac_x(xk, uk))[i]
                g[layout.u_slice(k)] = -np.asarray(model.jac_u(xk, uk))[i]
                return g

            eqs.append(ScalarConstraint(dyn_val, dyn_grad, f"dyn[{k}][{i}]"))

    ineqs = []
    h0 = float(h.value(x_t)) if h is not None else 0.0
    if form is Formulation.MPC_CBF:
        for k in range(N):
            rate = 1.0 - float(rc.gamma[k])

            def val(z, k=k, rate=rate):
                hk = h0 if k == 0 else float(h.value(xk_of(z, k)))
                return float(h.value(z[layout.x_slice(k + 1)])) - rate * hk

            def grad(z, k=k, rate=rate):
                g = np.zeros(nv)
                g[layout.x_slice(k + 1)] = np.asarray(h.gradient(z[layout.x_slice(k + 1)]))
                if k > 0:
                    g[layout.x_slice(k)] = -rate * np.asarray(h.gradient(z[layout.x_slice(k)]))
                return g

            ineqs.append(ScalarConstraint(val, grad, f"cbf[{k}]"))
    elif form is Formulation.MPC_GCBF:
        m_rel = rc.gcbf_relative_degree
        bound = (1.0 - float(rc.gamma[0])) ** m_rel * h0

        def gval(z, m_rel=m_rel, bound=bound):
            return float(h.value(z[layout.x_slice(m_rel)])) - bound

        def ggrad(z, m_rel=m_rel):
            g = np.zeros(nv)
            g[layout.x_slice(m_rel)] = np.asarray(h.gradient(z[layout.x_slice(m_rel)]))
            return g

        ineqs.append(ScalarConstraint(gval, ggrad, f"gcbf[{m_rel}]"))
    elif form in RELAXED:
        for k in range(rc.M_cbf):
            rate = 1.0 - float(rc.gamma[k])
            w_idx = layout.omega_slice.start + k

            def val(z, k=k, rate=rate, w_idx=w_idx):
                hk = h0 if k == 0 else float(h.value(xk_of(z, k)))
                return float(h.value(z[layout.x_slice(k + 1)])) - z[w_idx] * rate * hk

            def grad(z, k=k, rate=rate, w_idx=w_idx):
                g = np.zeros(nv)
                g[layout.x_slice(k + 1)] = np.asarray(h.gradient(z[layout.x_slice(k + 1)]))
                hk = h0 if k == 0 else float(h.value(xk_of(z, k)))
                if k > 0:
                    g[layout.x_slice(k)] = -z[w_idx] * rate * np.asarray(
                        h.gradient(z[layout.x_slice(k)]))
                g[w_idx] = -rate * hk
                return g

            ineqs.append(ScalarConstraint(val, grad, f"cbf[{k}]"))

    if rc.M_clf:
        V0 = float(V.value(x_t))
        for k in range(rc.M_clf):
            keep = 1.0 - float(rc.alpha[k])
            s_idx = layout.slack_slice.start + k

            def cval(z, k=k, keep=keep, s_idx=s_idx):
                vk = V0 if k == 0 else float(V.value(xk_of(z, k)))
                return float(z[s_idx]) + keep * vk - float(V.value(z[layout.x_slice(k + 1)]))

            def cgrad(z, k=k, keep=keep, s_idx=s_idx):
                g = np.zeros(nv)
                g[layout.x_slice(k + 1)] = -np.asarray(V.gradient(z[layout.x_slice(k + 1)]))
                if k > 0:
                    g[layout.x_slice(k)] = keep * np.asarray(V.gradient(z[layout.x_slice(k)]))
                g[s_idx] = 1.0
                return g

            ineqs.append(ScalarConstraint(cval, cgrad, f"clf[{k}]"))

    problem = _build_objective(rc, layout, V, x_t)
    problem.eq_constraints = eqs
    problem.ineq_constraints = ineqs

    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    for k in range(N):
        lb[layout.u_slice(k)] = model.input_lower
        ub[layout.u_slice(k)] = model.input_upper
    if model.state_lower is not None or model.state_upper is not None:
        slo = model.state_lower if model.state_lower is not None else np.full(n, -np.inf)
        shi = model.state_upper if model.state_upper is not None else np.full(n, np.inf)
        for k in range(1, N + 1):
            lb[layout.x_slice(k)] = slo
            ub[layout.x_slice(k)] = shi
    lb[layout.omega_slice] = 0.0
    ub[layout.omega_slice] = OMEGA_MAX
    problem.var_lower, problem.var_upper = lb, ub

    problem.initial_guess = _default_guess(rc, layout, model, h, V, x_t, lb, ub)
    return Transcription(problem=problem, layout=layout, resolved=rc, x_t=x_t)


def _build_objective(rc: ResolvedConfig, layout: VarLayout,
                     V: Optional[ScalarFieldSpec], x_t: np.ndarray) -> NlpProblem:
    """Stage/terminal/penalty costs as stacked linear residuals when possible.

    Every cost term here is quadratic; the only obstruction to a linear
    residual form is a terminal ``beta V(x_N)`` with a non-quadratic V, in
    which case the objective falls back to generic callbacks (BFGS path).
    """
    form = rc.formulation
    n, m, N, nv = layout.n, layout.m, layout.N, layout.num_vars
    goal = rc.goal_state
    LQ = _sqrt_psd(rc.Q)
    LR = _sqrt_psd(rc.R)

    rows = []  # (matrix_block, col_slice, offset_vec)
    for k in range(N):
        if k == 0:
            rows.append((None, None, LQ @ (x_t - goal)))
        else:
            rows.append((LQ, layout.x_slice(k), -LQ @ goal))
        rows.append((LR, layout.u_slice(k), np.zeros(m)))
    if form in (Formulation.MPC_CBF, Formulation.MPC_GCBF):
        LP = _sqrt_psd(rc.P_terminal)
        rows.append((LP, layout.x_slice(N), -LP @ goal))
    nonquad_terminal = False
    if form is Formulation.CBF_NMPC:
        if V.quadratic_weights is not None:
            LV = np.sqrt(rc.beta) * _sqrt_psd(V.quadratic_weights)
            rows.append((LV, layout.x_slice(N), np.zeros(n)))
        else:
            nonquad_terminal = True
    if rc.M_cbf:
        w = np.sqrt(rc.P_omega)
        blk = w * np.eye(rc.M_cbf)
        rows.append((blk, layout.omega_slice, -w * np.ones(rc.M_cbf)))
    if rc.M_clf and form is not Formulation.DCLF_DCBF:
        blk = np.sqrt(rc.P_slack) * np.eye(rc.M_clf)
        rows.append((blk, layout.slack_slice, np.zeros(rc.M_clf)))

    total = sum(len(off) for _, _, off in rows)
    Rmat = np.zeros((total, nv))
    rvec = np.zeros(total)
    at = 0
    for blk, cols, off in rows:
        sz = len(off)
        if blk is not None:
            Rmat[at:at + sz, cols] = blk
        rvec[at:at + sz] = off
        at += sz

    if not nonquad_terminal:
        return _least_squares_problem(Rmat, rvec, nv)

    beta = rc.beta
    xN = layout.x_slice(N)

    def objective(z):
        r = Rmat @ z + rvec
        return float(r @ r) + beta * float(V.value(z[xN]))

    def gradient(z):
        g = 2.0 * Rmat.T @ (Rmat @ z + rvec)
        g[xN] += beta * np.asarray(V.gradient(z[xN]))
        return g

    return NlpProblem(num_vars=nv, objective=objective, objective_grad=gradient)


def _default_guess(rc: ResolvedConfig, layout: VarLayout, model: SystemModel,
                   h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
                   x_t: np.ndarray, lb: np.ndarray, ub: np.ndarray,
                   u_const: Optional[np.ndarray] = None) -> np.ndarray:
    """Constant-input rollout: dynamics-consistent start with matched relaxations.

    With the default zero input this seeds the transcription; other constant
    inputs build cheap feasibility-witness candidates for grid sampling.
    """
    z = np.zeros(layout.num_vars)
    u0 = np.zeros(model.m) if u_const is None else np.asarray(u_const, dtype=float)
    u0 = np.clip(u0, model.input_lower, model.input_upper)
    xs = model.rollout(x_t, np.tile(u0, (rc.N, 1)))
    for k in range(rc.N):
        z[layout.u_slice(k)] = u0
        z[layout.x_slice(k + 1)] = xs[k + 1]
    if rc.M_cbf and h is not None:
        hs = np.array([float(h.value(x)) for x in xs])
        for k in range(rc.M_cbf):
            denom = (1.0 - float(rc.gamma[k])) * hs[k]
            if denom > 1e-12:
                z[layout.omega_slice.start + k] = float(np.clip(hs[k + 1] / denom, 0.0, 1.0))
            elif hs[k + 1] >= 0.0:
                z[layout.omega_slice.start + k] = 0.0
            else:
                z[layout.omega_slice.start + k] = 1.0
    if rc.M_clf and V is not None:
        vs = np.array([float(V.value(x)) for x in xs])
        for k in range(rc.M_clf):
            z[layout.slack_slice.start + k] = max(
                0.0, vs[k + 1] - (1.0 - float(rc.alpha[k])) * vs[k])
    return np.clip(z, lb, ub)


def constant_input_guess(transcription: Transcription, model: SystemModel,
                         h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
                         u_const) -> np.ndarray:
    """Decision vector for a constant-input rollout from the transcribed state.

    The result satisfies the dynamics equalities exactly and picks relaxation
    variables that match the rollout, so its total constraint violation equals
    the violation of the barrier/CLF conditions along that rollout; a zero
    violation makes it a ready feasibility certificate.
    """
    rc = transcription.resolved
    lay = transcription.layout
    u_const = np.asarray(u_const, dtype=float).reshape(model.m)
    if not lay.explicit_states:
        u0 = np.clip(u_const, model.input_lower, model.input_upper)
        x1 = model.step_map(transcription.x_t, u0)
        alpha = float(rc.alpha[0])
        s = max(0.0, float(V.value(x1)) - (1.0 - alpha) * float(V.value(transcription.x_t)))
        return np.concatenate([u0, [s]])
    return _default_guess(rc, lay, model, h, V, transcription.x_t,
                          transcription.problem.var_lower,
                          transcription.problem.var_upper, u_const=u_const)


def pin_omega(transcription: Transcription, value: float = 1.0) -> Transcription:
    """Copy of a relaxed transcription with all omega variables fixed to ``value``.

    With omega pinned at 1 the relaxed barrier constraints coincide with the
    fixed-decay ones, which is how the equivalence with MPC-CBF is exercised.
    """
    if transcription.layout.M_cbf == 0:
        raise ValueError("transcription has no relaxation variables")
    p = transcription.problem
    lb = p.var_lower.copy()
    ub = p.var_upper.copy()
    guess = p.initial_guess.copy()
    sl = transcription.layout.omega_slice
    lb[sl] = ub[sl] = guess[sl] = value
    new_problem = replace(p, var_lower=lb, var_upper=ub, initial_guess=guess)
    return replace(transcription, problem=new_problem)


def shift_warm_start(layout: VarLayout, model: SystemModel,
                     z_prev: np.ndarray) -> np.ndarray:
    """One-step-shifted initial guess from the previous receding-horizon solution.

    Inputs and states move up one slot, the final state is extended with the
    model step, relaxations shift with nominal tail values (omega 1, slack 0).
    """
    if not layout.explicit_states:
        return z_prev.copy()
    z = np.empty(layout.num_vars)
    N = layout.N
    for k in range(N - 1):
        z[layout.u_slice(k)] = z_prev[layout.u_slice(k + 1)]
    z[layout.u_slice(N - 1)] = z_prev[layout.u_slice(N - 1)]
    for k in range(1, N):
        z[layout.x_slice(k)] = z_prev[layout.x_slice(k + 1)]
    xN = model.step_map(z_prev[layout.x_slice(N)], z_prev[layout.u_slice(N - 1)])
    z[layout.x_slice(N)] = xN
    if layout.M_cbf:
        w_prev = z_prev[layout.omega_slice]
        z[layout.omega_slice] = np.concatenate([w_prev[1:], [1.0]])
    if layout.M_clf:
        s_prev = z_prev[layout.slack_slice]
        z[layout.slack_slice] = np.concatenate([s_prev[1:], [0.0]])
    return z


def make_layout(config: ControllerConfig, model: SystemModel) -> VarLayout:
    """Decision-vector layout implied by a configuration (constant across states)."""
    rc = config.resolve(model)
    return VarLayout(n=model.n, m=model.m, N=rc.N, M_cbf=rc.M_cbf, M_clf=rc.M_clf,
                     explicit_states=rc.formulation is not Formulation.DCLF_DCBF)


def control_step(config: ControllerConfig, model: SystemModel,
                 h: Optional[ScalarFieldSpec], V: Optional[ScalarFieldSpec],
                 x_t: StateVec, settings: Optional[SolverSettings] = None,
                 warm_start: Optional[np.ndarray] = None) -> ControlDecision:
    """Solve the receding-horizon problem at ``x_t`` and extract the first input.

    On anything but Optimal the decision carries no input; the caller chooses
    the fallback. ``warm_start`` replaces the transcription's default guess
    (use :func:`shift_warm_start` to build it from the previous solution).
    """
    settings = settings or SolverSettings()
    tr = transcribe(config, model, h, V, x_t)
    if h is not None and float(h.value(tr.x_t)) < 0.0:
        warnings.warn(
            f"current state has h(x_t) = {float(h.value(tr.x_t)):.6g} < 0; the "
            "barrier constraints cannot certify safety from outside the safe set",
            stacklevel=2)
    if warm_start is not None:
        tr.problem.initial_guess = np.clip(
            np.asarray(warm_start, dtype=float).reshape(tr.problem.num_vars),
            tr.problem.var_lower, tr.problem.var_upper)
    res = solve(tr.problem, settings)
    lay = tr.layout
    if res.status is not SolveStatus.OPTIMAL:
        return ControlDecision(u_applied=None, status=res.status,
                               objective=res.objective_value, omega_opt=None,
                               slack_opt=None, predicted_open_loop=None, result=res)
    z = res.z_opt
    if lay.explicit_states:
        predicted = np.vstack([tr.x_t[None, :], lay.states(z)])
    else:
        predicted = np.vstack([tr.x_t, model.step_map(tr.x_t, z[lay.u_slice(0)])])
    return ControlDecision(
        u_applied=z[lay.u_slice(0)].copy(),
        status=res.status,
        objective=res.objective_value,
        omega_opt=lay.omegas(z) if lay.M_cbf else None,
        slack_opt=lay.slacks(z) if lay.M_clf else None,
        predicted_open_loop=predicted,
        result=res,
    )
