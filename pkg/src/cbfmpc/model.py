"""Discrete-time system models and barrier/Lyapunov scalar fields.

The central objects are :class:`SystemModel` (dynamics ``x_{t+1} = f(x_t, u_t)``
with box-bounded inputs) and :class:`ScalarFieldSpec` (a scalar function of the
state with its gradient). A barrier field ``h`` defines the safe set
``C = {x : h(x) >= 0}``; a Lyapunov field ``V`` measures distance to the control
goal. Everything here is immutable after construction and safe to evaluate
concurrently. The built-in factories use module-level functions plus
``functools.partial`` so models and fields pickle cleanly for worker pools.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

# State and input vectors are plain float64 arrays; StateVec has length n and
# InputVec length m of the owning SystemModel.
StateVec = np.ndarray
InputVec = np.ndarray


def _as_vector(x, length: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (length,):
        raise ValueError(f"{name} must have length {length}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite, got {v}")
    return v


@dataclass(frozen=True)
class SystemModel:
    """Discrete-time dynamics with analytic Jacobians and input box bounds.

    ``step_map(x, u)`` advances one sampling interval; ``jac_x``/``jac_u`` are
    the analytic derivatives of ``step_map`` and must match finite differences.
    ``step_batch``, when provided, maps stacked states/inputs of shape (B, n)
    and (B, m) in one call; the brute-force feasibility oracle relies on it for
    throughput but falls back to a Python loop otherwise.
    """

    n: int
    m: int
    dt: float
    step_map: Callable[[StateVec, InputVec], StateVec]
    jac_x: Callable[[StateVec, InputVec], np.ndarray]
    jac_u: Callable[[StateVec, InputVec], np.ndarray]
    input_lower: np.ndarray
    input_upper: np.ndarray
    state_lower: Optional[np.ndarray] = None
    state_upper: Optional[np.ndarray] = None
    step_batch: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "system"

    def __post_init__(self):
        lo = _as_vector(self.input_lower, self.m, "input_lower")
        hi = _as_vector(self.input_upper, self.m, "input_upper")
        if np.any(lo > hi):
            raise ValueError("input_lower must be <= input_upper componentwise")
        object.__setattr__(self, "input_lower", lo)
        object.__setattr__(self, "input_upper", hi)
        for attr in ("state_lower", "state_upper"):
            v = getattr(self, attr)
            if v is not None:
                object.__setattr__(self, attr, _as_vector(v, self.n, attr))

    def step(self, x: StateVec, u: InputVec) -> StateVec:
        """One step of the dynamics with shape/finiteness checks."""
        x = _as_vector(x, self.n, "state")
        u = _as_vector(u, self.m, "input")
        return np.asarray(self.step_map(x, u), dtype=float).reshape(self.n)

    def step_many(self, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """Vectorized step over B stacked (state, input) pairs."""
        states = np.asarray(states, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        if self.step_batch is not None:
            return self.step_batch(states, inputs)
        return np.stack(
            [self.step_map(states[i], inputs[i]) for i in range(states.shape[0])]
        )

    def rollout(self, x0: StateVec, inputs: np.ndarray) -> np.ndarray:
        """States x_0..x_T visited under an input sequence of shape (T, m)."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        xs = np.empty((inputs.shape[0] + 1, self.n))
        xs[0] = _as_vector(x0, self.n, "x0")
        for k in range(inputs.shape[0]):
            xs[k + 1] = self.step_map(xs[k], inputs[k])
        return xs


@dataclass(frozen=True)
class ScalarFieldSpec:
    """Scalar function of the state with analytic gradient.

    ``kind`` is "barrier" (safe set is the zero superlevel set) or "lyapunov".
    ``value_batch`` optionally evaluates stacked states of shape (B, n).
    ``quadratic_weights`` is set when the field is exactly ``x^T P x``, which
    lets transcriptions expose a Gauss-Newton-friendly residual form.
    """

    value: Callable[[StateVec], float]
    gradient: Callable[[StateVec], np.ndarray]
    kind: str
    dim: int
    name: str = "field"
    value_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    quadratic_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("barrier", "lyapunov"):
            raise ValueError(f"kind must be 'barrier' or 'lyapunov', got {self.kind!r}")

    def __call__(self, x: StateVec) -> float:
        return float(self.value(np.asarray(x, dtype=float)))

    def value_many(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if self.value_batch is not None:
            return np.asarray(self.value_batch(states), dtype=float)
        return np.array([self.value(s) for s in states], dtype=float)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with steps scaled by coordinate magnitude."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def scalar_field_from_value(value: Callable[[StateVec], float], kind: str, dim: int,
                            name: str = "custom") -> ScalarFieldSpec:
    """Wrap a user-supplied value function with a finite-difference gradient."""
    return ScalarFieldSpec(
        value=value,
        gradient=partial(finite_difference_gradient, value),
        kind=kind,
        dim=dim,
        name=name,
    )


# --- triple-integrator benchmark -------------------------------------------

def _linear_step(A: np.ndarray, B: np.ndarray, x: StateVec, u: InputVec) -> StateVec:
    return A @ x + B @ u


def _linear_step_batch(A: np.ndarray, B: np.ndarray, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
    return xs @ A.T + us @ B.T


def _const_matrix(M: np.ndarray, x: StateVec, u: InputVec) -> np.ndarray:
    return M


def triple_integrator(dt: float, j_min: float, j_max: float) -> SystemModel:
    """Jerk-driven triple integrator, discretized exactly (zero-order hold).

    State is (position, velocity, acceleration), input is jerk held constant
    over each interval, so

        x+ = x + v dt + a dt^2/2 + j dt^3/6
        v+ = v + a dt + j dt^2/2
        a+ = a + j dt
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not j_min < j_max:
        raise ValueError(f"need j_min < j_max, got [{j_min}, {j_max}]")
    A = np.array([
        [1.0, dt, dt * dt / 2.0],
        [0.0, 1.0, dt],
        [0.0, 0.0, 1.0],
    ])
    B = np.array([[dt ** 3 / 6.0], [dt * dt / 2.0], [dt]])
    return SystemModel(
        n=3,
        m=1,
        dt=dt,
        step_map=partial(_linear_step, A, B),
        jac_x=partial(_const_matrix, A),
        jac_u=partial(_const_matrix, B),
        input_lower=np.array([j_min]),
        input_upper=np.array([j_max]),
        step_batch=partial(_linear_step_batch, A, B),
        name="triple_integrator",
    )


# --- built-in barrier and Lyapunov fields -----------------------------------

_HALFSPACE_GRAD = np.array([-1.0, 0.0, 0.0])


def _halfspace_value(x: StateVec) -> float:
    return -float(x[0])


def _halfspace_gradient(x: StateVec) -> np.ndarray:
    return _HALFSPACE_GRAD.copy()


def _halfspace_value_batch(xs: np.ndarray) -> np.ndarray:
    return -xs[:, 0]


def barrier_halfspace() -> ScalarFieldSpec:
    """h(x) = -position: safe while the system stays at or left of the plane x=0."""
    return ScalarFieldSpec(
        value=_halfspace_value,
        gradient=_halfspace_gradient,
        kind="barrier",
        dim=3,
        name="halfspace",
        value_batch=_halfspace_value_batch,
    )


def _sphere_value(x: StateVec) -> float:
    return float(x @ x) - 1.0


def _sphere_gradient(x: StateVec) -> np.ndarray:
    return 2.0 * np.asarray(x, dtype=float)


def _sphere_value_batch(xs: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", xs, xs) - 1.0


def barrier_sphere() -> ScalarFieldSpec:
    """h(x) = |x|^2 - 1: safe outside the unit ball in (position, velocity, acceleration)."""
    return ScalarFieldSpec(
        value=_sphere_value,
        gradient=_sphere_gradient,
        kind="barrier",
        dim=3,
        name="sphere",
        value_batch=_sphere_value_batch,
    )


def _quad_value(P: np.ndarray, x: StateVec) -> float:
    return float(x @ P @ x)


def _quad_gradient(P: np.ndarray, x: StateVec) -> np.ndarray:
    return 2.0 * (P @ x)


def _quad_value_batch(P: np.ndarray, xs: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk,ik->i", xs, P, xs)


def lyapunov_quadratic(P: np.ndarray) -> ScalarFieldSpec:
    """V(x) = x^T P x for symmetric positive-definite P (stabilization to the origin)."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"P must be square, got shape {P.shape}")
    if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12):
        raise ValueError("P must be symmetric")
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise ValueError("P must be positive definite") from exc
    return ScalarFieldSpec(
        value=partial(_quad_value, P),
        gradient=partial(_quad_gradient, P),
        kind="lyapunov",
        dim=P.shape[0],
        name="quadratic",
        value_batch=partial(_quad_value_batch, P),
        quadratic_weights=P.copy(),
    )


def lqr_cost_to_go(model: SystemModel, Q: np.ndarray, R: np.ndarray,
                   max_iter: int = 10_000, tol: float = 1e-11) -> np.ndarray:
    """Infinite-horizon LQR cost-to-go matrix for a linear model.

    Iterates the discrete Riccati recursion with the model linearized at the
    origin (exact for linear dynamics). The result prices velocity and
    acceleration the way the infinite-horizon controller does, which makes it
    the natural terminal weight for short-horizon tracking problems.
    """
    zx = np.zeros(model.n)
    zu = np.zeros(model.m)
    A = np.asarray(model.jac_x(zx, zu), dtype=float)
    B = np.asarray(model.jac_u(zx, zu), dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    P = Q.copy()
    for _ in range(max_iter):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) < tol:
            return P_next
        P = P_next
    raise RuntimeError("Riccati iteration did not converge; is (A, B) stabilizable?")


# --- self-check helpers ------------------------------------------------------

def check_field_gradient(field: ScalarFieldSpec, points: np.ndarray) -> float:
    """Worst relative mismatch between the field gradient and central differences."""
    worst = 0.0
    for x in np.atleast_2d(points):
        g = np.asarray(field.gradient(x), dtype=float)
        g_fd = finite_difference_gradient(field.value, x)
        scale = max(1.0, float(np.linalg.norm(g_fd)))
        worst = max(worst, float(np.linalg.norm(g - g_fd)) / scale)
    return worst


def check_model_jacobians(model: SystemModel, states: np.ndarray, inputs: np.ndarray) -> float:
    """Worst relative mismatch between analytic step Jacobians and finite differences."""
    worst = 0.0
    for x, u in zip(np.atleast_2d(states), np.atleast_2d(inputs)):
        Jx = np.asarray(model.jac_x(x, u), dtype=float)
        Ju = np.asarray(model.jac_u(x, u), dtype=float)
        for i in range(model.n):
            gx = finite_difference_gradient(lambda xx: float(model.step_map(xx, u)[i]), x)
            scale = max(1.0, float(np.linalg.norm(gx)))
            worst = max(worst, float(np.linalg.norm(Jx[i] - gx)) / scale)
        for i in range(model.n):
            gu = finite_difference_gradient(lambda uu: float(model.step_map(x, uu)[i]), u)
            scale = max(1.0, float(np.linalg.norm(gu)))
            worst = max(worst, float(np.linalg.norm(Ju[i] - gu)) / scale)
    return worst
