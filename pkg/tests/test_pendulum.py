import math

import numpy as np
import pytest

from algorithms import distdp
from features import pendulum
from features.pendulum import FAILURE_ANGLE, Camera, PendulumParams, PendulumState
from features.pendulum_training import ConstantEstimator, PerfectEstimator, evaluate_mttf


def test_step_examples():
    s = pendulum.step(PendulumState(0.0, 0.0), 0.0)
    assert s.theta == 0.0
    assert abs(s.omega) < 1e-12

    s = pendulum.step(PendulumState(0.2, 0.0), 0.0)
    assert s.theta == pytest.approx(0.2)
    assert s.omega == pytest.approx(0.14900, abs=5e-6)

    s = pendulum.step(PendulumState(0.0, 8.0), 2.0)
    assert s.omega == 8.0
    assert s.theta == pytest.approx(0.4)


def test_torque_is_clipped():
    a = pendulum.step(PendulumState(0.1, 0.0), 50.0)
    b = pendulum.step(PendulumState(0.1, 0.0), 2.0)
    assert a.omega == b.omega


def test_upright_is_unstable_without_torque():
    s = PendulumState(0.05, 0.0)
    for _ in range(5):
        nxt = pendulum.step(s, 0.0)
        assert abs(nxt.theta) >= abs(s.theta)
        s = nxt
    assert s.theta > 0.05


def test_params_must_be_positive():
    with pytest.raises(ValueError):
        PendulumParams(dt=0.0)


@pytest.mark.parametrize("theta, omega, expected", [
    (0.0, 0.0, 0.0),
    (0.2, 0.0, -1.09362),
    (0.2, 3.0, -2.0),
])
def test_control_examples(theta, omega, expected):
    assert pendulum.control(PendulumState(theta, omega)) == pytest.approx(expected, abs=1e-5)


def test_controller_balances_under_perfect_perception():
    rng = np.random.default_rng(0)
    initial = pendulum.sample_initial_states(100, rng)
    assert np.abs(initial.theta).max() <= 0.3 and np.abs(initial.omega).max() <= 0.2
    ttf = pendulum.simulate_closed_loop(initial, PerfectEstimator(), 500, Camera(noise_sigma=0.0), rng)
    assert np.all(ttf == 500)


def test_controller_recovers_from_the_corners_of_the_start_box():
    corners = PendulumState(np.array([0.3, 0.3, -0.3, -0.3]), np.array([0.2, -0.2, 0.2, -0.2]))
    ttf = pendulum.simulate_closed_loop(corners, PerfectEstimator(), 500, Camera(noise_sigma=0.0),
                                        np.random.default_rng(0))
    np.testing.assert_array_equal(ttf, 500)
    # leaning and falling the same way faster than this saturates the torque limit
    fast = PendulumState(np.array([0.3]), np.array([0.5]))
    assert pendulum.control(fast) == pytest.approx(-2.0)


def test_render_is_deterministic_and_symmetric():
    upright = PendulumState(0.0, 0.0)
    a = pendulum.render(upright, upright, noise_sigma=0.0, seed=1)
    b = pendulum.render(upright, upright, noise_sigma=0.0, seed=2)
    assert a.frames.shape == (2, 16, 16)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_allclose(a.frames[1], a.frames[1][:, ::-1], atol=1e-6)

    noisy = pendulum.render(upright, upright, noise_sigma=0.1, seed=3)
    np.testing.assert_array_equal(noisy.frames, pendulum.render(upright, upright, noise_sigma=0.1, seed=3).frames)
    assert noisy.frames.min() >= 0.0 and noisy.frames.max() <= 1.0


def test_render_distinguishes_angles():
    upright = PendulumState(0.0, 0.0)
    tilted = PendulumState(0.4, 0.0)
    a = pendulum.render(upright, upright, noise_sigma=0.0)
    b = pendulum.render(tilted, tilted, noise_sigma=0.0)
    assert np.mean(np.abs(a.frames - b.frames)) > 0


def test_render_batch_orders_previous_then_current():
    camera = Camera(size=16, noise_sigma=0.0)
    obs = pendulum.render_batch(np.array([0.3]), np.array([-0.3]), camera, np.random.default_rng(0))
    assert obs.shape == (1, 2 * 16 * 16)
    frames = obs.reshape(2, 16, 16)
    np.testing.assert_allclose(frames[0], frames[1][:, ::-1], atol=1e-6)


def test_error_model():
    errors, probs, error_grid = pendulum.pendulum_error_model()
    assert errors.shape == (121, 2)
    assert error_grid.shape == (11, 11)
    zero = np.flatnonzero(np.all(errors == 0.0, axis=1))
    assert zero.size == 1
    assert probs.argmax() == zero[0]
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    # the grid is symmetric, so reversing the rows maps each atom to its negative
    np.testing.assert_allclose(errors[::-1], -errors)
    np.testing.assert_allclose(probs[::-1], probs, atol=1e-12)
    assert errors[:, 0].max() == pytest.approx(0.4)
    assert errors[:, 1].max() == pytest.approx(1.0)


def test_mdp_costs():
    mdp = pendulum.build_pendulum_mdp(grid=pendulum.state_grid(5, 5))
    states = np.array([[0.0, 0.0], [FAILURE_ANGLE, 0.0], [0.3, 1.0]])
    np.testing.assert_array_equal(mdp.cost(3, states, 0), 0.0)
    np.testing.assert_allclose(mdp.cost(0, states, 0), [0.0, FAILURE_ANGLE, 0.3])
    assert mdp.horizon == 20
    assert mdp.discount == 1.0


def test_failed_states_are_absorbing():
    mdp = pendulum.build_pendulum_mdp(grid=pendulum.state_grid(5, 5))
    states = np.array([[FAILURE_ANGLE, 1.0], [-FAILURE_ANGLE, -2.0]])
    nxt, probs = mdp.transition(5, states, 0)
    np.testing.assert_array_equal(nxt[:, 0], states)
    np.testing.assert_array_equal(probs, 1.0)


def test_cost_support():
    support = pendulum.pendulum_cost_support()
    assert support.size == 50
    assert support[0] == 0.0 and support[-1] == pytest.approx(math.pi / 4)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 0.99])
def test_underestimating_the_angle_is_riskier(pendulum_table, alpha):
    s = [0.2, 0.0]
    under = distdp.risk(pendulum_table, s, [-0.2, 0.0], alpha)
    over = distdp.risk(pendulum_table, s, [0.2, 0.0], alpha)
    assert under > over


def test_mean_risk_grows_with_alpha(pendulum_table):
    s = np.array([[0.2, 0.0]])
    means = [distdp.risk_all_errors(pendulum_table, s, a).mean() for a in (0.0, 0.2, 0.5, 0.8, 0.99)]
    assert np.all(np.diff(means) >= -1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.5])
def test_doomed_corners_get_low_weight(pendulum_table, alpha):
    field = distdp.risk_weight_field(pendulum_table, alpha)
    threshold = np.percentile(field, 25)
    for sign in (1.0, -1.0):
        corner = [sign * 0.9 * FAILURE_ANGLE, sign * 0.9 * 2.0]
        assert distdp.risk_weight(pendulum_table, corner, alpha) <= threshold + 1e-9
    # the largest weight sits away from the doomed corners
    theta, omega = pendulum_table.grid.points()[field.argmax()]
    assert not (abs(theta) > 0.8 * FAILURE_ANGLE and np.sign(theta) == np.sign(omega))


def test_perfect_perception_never_fails():
    result = evaluate_mttf(PerfectEstimator(), n_traj=20, horizon=500, n_trials=2, seed=1,
                           camera=Camera(noise_sigma=0.0))
    assert result.mean == 500
    assert result.se == 0
    assert str(result) == "500 ± 0"


def test_constant_estimate_lets_the_pendulum_fall():
    result = evaluate_mttf(ConstantEstimator(), n_traj=20, horizon=500, n_trials=2, seed=1)
    assert result.mean < 500
