import pickle

import numpy as np
import pytest

from cbfmpc.model import (
    barrier_halfspace,
    barrier_sphere,
    check_field_gradient,
    check_model_jacobians,
    finite_difference_gradient,
    lyapunov_quadratic,
    scalar_field_from_value,
    triple_integrator,
)

DT = 0.1


@pytest.fixture
def model():
    return triple_integrator(DT, -1.0, 1.0)


def euler_substep_oracle(x0, j, dt, substeps=10_000):
    """Integrate xdot=v, vdot=a, adot=j with explicit Euler at dt/substeps."""
    x = np.asarray(x0, dtype=float).copy()
    h = dt / substeps
    for _ in range(substeps):
        x = x + h * np.array([x[1], x[2], j])
    return x


def test_zero_state_zero_input_fixed_point(model):
    assert np.array_equal(model.step([0, 0, 0], [0]), np.zeros(3))


def test_pure_velocity_integration(model):
    np.testing.assert_allclose(model.step([0, 1, 0], [0]), [0.1, 1.0, 0.0], rtol=0, atol=1e-15)


def test_unit_jerk_closed_form_and_euler_oracle(model):
    stepped = model.step([0, 0, 0], [1])
    np.testing.assert_allclose(stepped, [DT**3 / 6, DT**2 / 2, DT], rtol=1e-14)
    # frozen from the 1e4-substep Euler integration of the continuous system
    oracle = euler_substep_oracle([0, 0, 0], 1.0, DT)
    np.testing.assert_allclose(stepped, oracle, atol=1e-6)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        triple_integrator(0.0, -1, 1)
    with pytest.raises(ValueError):
        triple_integrator(-0.1, -1, 1)
    with pytest.raises(ValueError):
        triple_integrator(0.1, 1.0, 1.0)
    with pytest.raises(ValueError):
        triple_integrator(0.1, 2.0, -2.0)


def test_step_is_affine_combination(model):
    rng = np.random.default_rng(7)
    for _ in range(20):
        x1, x2 = rng.normal(size=3), rng.normal(size=3)
        u1, u2 = rng.normal(size=1), rng.normal(size=1)
        a = rng.normal()
        b = 1.0 - a
        left = model.step(a * x1 + b * x2, a * u1 + b * u2)
        right = a * model.step(x1, u1) + b * model.step(x2, u2)
        np.testing.assert_allclose(left, right, atol=1e-12)


def test_jacobians_match_finite_differences(model):
    rng = np.random.default_rng(3)
    states = rng.uniform([-2, 0, 0], [0, 2, 2], size=(5, 3))
    inputs = rng.uniform(-1, 1, size=(5, 1))
    assert check_model_jacobians(model, states, inputs) < 1e-7


def test_step_batch_matches_scalar(model):
    rng = np.random.default_rng(5)
    xs = rng.normal(size=(40, 3))
    us = rng.normal(size=(40, 1))
    batched = model.step_many(xs, us)
    looped = np.stack([model.step(x, u) for x, u in zip(xs, us)])
    np.testing.assert_allclose(batched, looped, atol=1e-14)


def test_rollout_shapes(model):
    xs = model.rollout([-2, 0, 1], np.full((8, 1), -1.0))
    assert xs.shape == (9, 3)
    np.testing.assert_allclose(xs[1], model.step([-2, 0, 1], [-1.0]))


def test_barrier_halfspace_values():
    h = barrier_halfspace()
    assert h([-2.0, 0.0, 1.0]) == pytest.approx(2.0)
    assert h([0.0, 1.3, -0.4]) == 0.0
    np.testing.assert_array_equal(h.gradient([5.0, 2.0, 1.0]), [-1.0, 0.0, 0.0])


def test_barrier_sphere_values():
    h = barrier_sphere()
    assert h([1, 0, 0]) == pytest.approx(0.0)
    assert h([-2, 0, 1]) == pytest.approx(4.0)  # 4 + 0 + 1 - 1
    np.testing.assert_allclose(h.gradient([1, 1, 1]), [2, 2, 2])


def test_lyapunov_quadratic_values():
    V = lyapunov_quadratic(np.eye(3))
    assert V([0, 0, 0]) == 0.0
    assert V([1, 2, 3]) == pytest.approx(14.0)
    V2 = lyapunov_quadratic(np.diag([2.0, 1.0, 1.0]))
    assert V2([1, 0, 0]) == pytest.approx(2.0)


def test_lyapunov_rejects_bad_weights():
    with pytest.raises(ValueError):
        lyapunov_quadratic(np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError):
        lyapunov_quadratic(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        lyapunov_quadratic(np.zeros((2, 3)))


def test_gradients_match_finite_differences_on_sampling_box():
    rng = np.random.default_rng(11)
    points = rng.uniform([-2, 0, 0], [0, 2, 2], size=(100, 3))
    for f in (barrier_halfspace(), barrier_sphere(), lyapunov_quadratic(np.diag([10.0, 1.0, 1.0]))):
        assert check_field_gradient(f, points) < 1e-5


def test_batch_values_match_scalar():
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(30, 3))
    for f in (barrier_halfspace(), barrier_sphere(), lyapunov_quadratic(np.eye(3))):
        np.testing.assert_allclose(f.value_many(pts), [f(p) for p in pts], atol=1e-12)


def test_finite_difference_fallback_field():
    f = scalar_field_from_value(lambda x: float(np.sin(x[0]) + x[1] ** 2), "barrier", 2)
    x = np.array([0.3, -1.2])
    np.testing.assert_allclose(f.gradient(x), [np.cos(0.3), -2.4], atol=1e-7)


def test_model_and_fields_pickle(model):
    for obj in (model, barrier_halfspace(), barrier_sphere(), lyapunov_quadratic(np.eye(3))):
        clone = pickle.loads(pickle.dumps(obj))
        assert clone is not None
    clone = pickle.loads(pickle.dumps(model))
    np.testing.assert_allclose(clone.step([-2, 0, 1], [0.5]), model.step([-2, 0, 1], [0.5]))


def test_finite_difference_gradient_quadratic_exact():
    g = finite_difference_gradient(lambda x: float(x @ x), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_allclose(g, [2.0, -4.0, 6.0], rtol=1e-9)
