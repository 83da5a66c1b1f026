import warnings

import numpy as np
import pytest

from cbfmpc.controllers import (
    ControllerConfig,
    Formulation,
    InvalidConfigurationError,
    control_step,
    penalty_phi,
    penalty_psi,
    pin_omega,
    shift_warm_start,
    transcribe,
)
from cbfmpc.model import barrier_halfspace, barrier_sphere, lyapunov_quadratic, triple_integrator
from cbfmpc.nlp import SolveStatus, SolverSettings, check_derivatives, solve


@pytest.fixture(scope="module")
def model():
    return triple_integrator(0.1, -1.0, 1.0)


@pytest.fixture(scope="module")
def h_half():
    return barrier_halfspace()


@pytest.fixture(scope="module")
def h_sphere():
    return barrier_sphere()


@pytest.fixture(scope="module")
def V_id():
    return lyapunov_quadratic(np.eye(3))


def cfg(formulation, **kw):
    return ControllerConfig(formulation=formulation, **kw)


# --- configuration validation -------------------------------------------------

def test_dclf_variable_count_is_two(model, h_sphere, V_id):
    tr = transcribe(cfg(Formulation.DCLF_DCBF, gamma=0.2, alpha=0.1), model,
                    h_sphere, V_id, [-2, 0, 1])
    assert tr.problem.num_vars == 2
    assert len(tr.problem.eq_constraints) == 0
    assert len(tr.problem.ineq_constraints) == 2


def test_cbf_nmpc_variable_and_constraint_counts(model, h_half, V_id):
    tr = transcribe(cfg(Formulation.CBF_NMPC, N=8, M_cbf=8, gamma=0.1), model,
                    h_half, V_id, [-2, 0, 1])
    assert tr.problem.num_vars == 8 * 1 + 8 * 3 + 8  # inputs + states + omegas
    assert len(tr.problem.eq_constraints) == 24
    assert len(tr.problem.ineq_constraints) == 8
    assert np.all(tr.problem.var_lower[tr.layout.omega_slice] == 0.0)
    lb = tr.problem.var_lower
    ub = tr.problem.var_upper
    for k in range(8):
        assert lb[tr.layout.u_slice(k)] == -1.0 and ub[tr.layout.u_slice(k)] == 1.0


def test_unused_parameter_rejected(model, h_half, V_id):
    with pytest.raises(InvalidConfigurationError, match="does not use"):
        transcribe(cfg(Formulation.CLF_NMPC, alpha=0.1, M_cbf=4), model, h_half,
                   V_id, [-2, 0, 1])
    with pytest.raises(InvalidConfigurationError, match="does not use"):
        transcribe(cfg(Formulation.MPC_CBF, gamma=0.1, P_omega=10.0), model,
                   h_half, V_id, [-2, 0, 1])
    with pytest.raises(InvalidConfigurationError, match="does not use"):
        transcribe(cfg(Formulation.DCLF_DCBF, gamma=0.1, alpha=0.1, N=8), model,
                   h_sphere_or(h_half), V_id, [-2, 0, 1])


def h_sphere_or(fallback):
    return fallback


def test_gamma_bounds_enforced(model, h_half, V_id):
    with pytest.raises(InvalidConfigurationError, match=r"\(0, 1\]"):
        transcribe(cfg(Formulation.MPC_CBF, gamma=1.5), model, h_half, V_id, [-2, 0, 1])
    with pytest.raises(InvalidConfigurationError, match=r"\(0, 1\]"):
        transcribe(cfg(Formulation.MPC_CBF, gamma=0.0), model, h_half, V_id, [-2, 0, 1])


def test_horizon_bounds_enforced(model, h_half, V_id):
    with pytest.raises(InvalidConfigurationError, match="M_cbf"):
        transcribe(cfg(Formulation.CBF_NMPC, N=4, M_cbf=5, gamma=0.1), model,
                   h_half, V_id, [-2, 0, 1])


def test_missing_gamma_rejected(model, h_half, V_id):
    with pytest.raises(InvalidConfigurationError, match="requires gamma"):
        transcribe(cfg(Formulation.MPC_CBF), model, h_half, V_id, [-2, 0, 1])


def test_missing_fields_rejected(model, h_half, V_id):
    with pytest.raises(InvalidConfigurationError, match="barrier"):
        transcribe(cfg(Formulation.MPC_CBF, gamma=0.1), model, None, V_id, [-2, 0, 1])
    with pytest.raises(InvalidConfigurationError, match="Lyapunov"):
        transcribe(cfg(Formulation.CLF_NMPC, alpha=0.1), model, None, None, [-2, 0, 1])


def test_per_step_gamma_schedule(model, h_half, V_id):
    gammas = [0.05, 0.1, 0.15, 0.2, 0.2, 0.2, 0.2, 0.2]
    tr = transcribe(cfg(Formulation.MPC_CBF, N=8, gamma=gammas), model, h_half,
                    V_id, [-2, 0, 1])
    assert tr.resolved.gamma.tolist() == gammas
    with pytest.raises(InvalidConfigurationError, match="per constrained step"):
        transcribe(cfg(Formulation.MPC_CBF, N=8, gamma=[0.1, 0.2]), model, h_half,
                   V_id, [-2, 0, 1])


def test_digest_stable_and_distinct():
    a = cfg(Formulation.MPC_CBF, N=8, gamma=0.1)
    b = cfg(Formulation.MPC_CBF, N=8, gamma=0.1)
    c = cfg(Formulation.MPC_CBF, N=8, gamma=0.2)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


# --- penalties -----------------------------------------------------------------

def test_penalty_values():
    assert penalty_psi(1.0, 123.0) == 0.0
    assert penalty_psi(0.0, 100.0) == 100.0
    assert penalty_phi(0.0, 55.0) == 0.0
    assert penalty_phi(2.0, 10.0) == 40.0
    with pytest.raises(ValueError):
        penalty_psi(0.5, 0.0)
    with pytest.raises(ValueError):
        penalty_phi(0.5, -1.0)


# --- transcription derivative checks --------------------------------------------

ALL_FORMS = [
    (Formulation.DCLF_DCBF, dict(gamma=0.2, alpha=0.1)),
    (Formulation.MPC_CBF, dict(N=4, gamma=0.15)),
    (Formulation.MPC_GCBF, dict(N=4, gamma=0.15, gcbf_relative_degree=3)),
    (Formulation.CLF_NMPC, dict(N=4, alpha=0.1, M_clf=3)),
    (Formulation.CBF_NMPC, dict(N=4, M_cbf=4, gamma=0.15, beta=10.0)),
    (Formulation.CLF_CBF_NMPC, dict(N=4, M_cbf=4, M_clf=4, gamma=0.15, alpha=0.1)),
]


@pytest.mark.parametrize("form,kw", ALL_FORMS)
@pytest.mark.parametrize("barrier", ["half", "sphere"])
def test_transcription_gradients(model, h_half, h_sphere, V_id, form, kw, barrier):
    h = h_half if barrier == "half" else h_sphere
    tr = transcribe(cfg(form, **kw), model, h, V_id, [-1.7, 0.4, 0.9])
    rng = np.random.default_rng(1)
    z = tr.problem.initial_guess + 0.1 * rng.normal(size=tr.problem.num_vars)
    rep = check_derivatives(tr.problem, z)
    assert rep.max_rel_error < 1e-5, f"{form}: worst {rep.worst} -> {rep.max_rel_error}"


def test_initial_guess_satisfies_dynamics(model, h_half, V_id):
    tr = transcribe(cfg(Formulation.CBF_NMPC, N=6, gamma=0.1), model, h_half,
                    V_id, [-1.5, 0.5, 0.5])
    z = tr.problem.initial_guess
    for c in tr.problem.eq_constraints:
        assert abs(c.value(z)) < 1e-12


# --- equivalences and solves -----------------------------------------------------

def _matched_costs():
    """MPC-CBF terminal (x-0)'(10 Q)(x-0) equals CBF-NMPC's beta V with V = x'Qx."""
    Q = np.diag([10.0, 1.0, 1.0])
    mpccbf = cfg(Formulation.MPC_CBF, N=8, gamma=0.2, Q=Q, R=1.0,
                 P_terminal=10.0 * Q, goal_state=np.zeros(3))
    cbfnmpc = cfg(Formulation.CBF_NMPC, N=8, M_cbf=8, gamma=0.2, beta=10.0, Q=Q,
                  R=1.0, goal_state=np.zeros(3))
    return mpccbf, cbfnmpc, lyapunov_quadratic(Q)


def test_pinned_omega_matches_mpc_cbf_objective(model, h_half):
    mpccbf, cbfnmpc, Vq = _matched_costs()
    settings = SolverSettings()
    x = np.array([-1.8, 0.3, 0.4])
    r1 = solve(transcribe(mpccbf, model, h_half, None, x).problem, settings)
    tr = pin_omega(transcribe(cbfnmpc, model, h_half, Vq, x), 1.0)
    r2 = solve(tr.problem, settings)
    assert r1.status == SolveStatus.OPTIMAL and r2.status == SolveStatus.OPTIMAL
    assert abs(r1.objective_value - r2.objective_value) < 1e-6


def test_control_step_optimal_deep_inside(model, h_half, V_id):
    dec = control_step(cfg(Formulation.CBF_NMPC, N=8, gamma=0.05), model, h_half,
                       V_id, [-2.0, 0.0, 1.0])
    assert dec.status == SolveStatus.OPTIMAL
    assert dec.u_applied.shape == (1,)
    assert -1.0 - 1e-9 <= dec.u_applied[0] <= 1.0 + 1e-9
    # first-input extraction is exact
    assert dec.u_applied[0] == dec.result.z_opt[0]
    assert dec.predicted_open_loop.shape == (9, 3)


def test_control_step_infeasible_at_oracle_infeasible_state(model, h_half, V_id):
    # position at the boundary moving outward at max speed: no jerk in [-1, 1]
    # can keep the position from increasing for several steps
    dec = control_step(cfg(Formulation.MPC_CBF, N=8, gamma=0.05), model, h_half,
                       None, [0.0, 2.0, 2.0])
    assert dec.status == SolveStatus.INFEASIBLE
    assert dec.u_applied is None


def test_safety_certificate_on_relaxed_optimal(model, h_half, V_id):
    rng = np.random.default_rng(4)
    found = 0
    for _ in range(12):
        x = rng.uniform([-2, 0, 0], [-0.6, 1.2, 1.2])
        dec = control_step(cfg(Formulation.CBF_NMPC, N=6, M_cbf=6, gamma=0.1),
                           model, h_half, V_id, x)
        if dec.status == SolveStatus.OPTIMAL:
            found += 1
            hs = -dec.predicted_open_loop[1:7, 0]
            assert np.all(hs >= -1e-8)
    assert found >= 6


def test_clf_slack_matches_decrease_violation(model, h_sphere, V_id):
    rng = np.random.default_rng(9)
    checked = 0
    for _ in range(10):
        x = rng.uniform([-2, 0, 0], [0, 2, 2])
        if h_sphere(x) < 0:
            continue
        dec = control_step(cfg(Formulation.DCLF_DCBF, gamma=0.2, alpha=0.1), model,
                           h_sphere, V_id, x)
        if dec.status != SolveStatus.OPTIMAL:
            continue
        checked += 1
        x1 = model.step(x, dec.u_applied)
        expected = max(0.0, V_id(x1) - (1.0 - 0.1) * V_id(x))
        assert dec.slack_opt[0] == pytest.approx(expected, abs=1e-5)
    assert checked >= 5


def test_pre_check_warning_outside_safe_set(model, h_half, V_id):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        control_step(cfg(Formulation.CBF_NMPC, N=4, gamma=0.1), model, h_half,
                     V_id, [0.5, 0.0, 0.0])
    assert any("h(x_t)" in str(w.message) for w in caught)


def test_shift_warm_start_layout(model, h_half, V_id):
    c = cfg(Formulation.CBF_NMPC, N=4, gamma=0.1)
    tr = transcribe(c, model, h_half, V_id, [-1.5, 0.2, 0.2])
    res = solve(tr.problem, SolverSettings())
    assert res.status == SolveStatus.OPTIMAL
    z = shift_warm_start(tr.layout, model, res.z_opt)
    lay = tr.layout
    np.testing.assert_allclose(z[lay.u_slice(0)], res.z_opt[lay.u_slice(1)])
    np.testing.assert_allclose(z[lay.x_slice(1)], res.z_opt[lay.x_slice(2)])
    assert z[lay.omega_slice][-1] == 1.0


def test_gcbf_uses_single_constraint(model, h_half):
    tr = transcribe(cfg(Formulation.MPC_GCBF, N=8, gamma=0.1, gcbf_relative_degree=3),
                    model, h_half, None, [-2, 0, 1])
    names = [c.name for c in tr.problem.ineq_constraints]
    assert names == ["gcbf[3]"]
