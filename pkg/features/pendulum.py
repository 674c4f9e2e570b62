"""Vision-based inverted pendulum: dynamics, controller, camera and risk MDP.

All functions accept scalars or numpy arrays for the state fields, so the same
code runs a single step or a batch of trajectories.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from algorithms.distdp import AbstractedPerceptionMdp
from algorithms.grid import Grid, log_cost_atoms, symmetric_log_grid

FAILURE_ANGLE = math.pi / 4


@dataclass(frozen=True)
class PendulumParams:
    g: float = 10.0
    length: float = 1.0
    mass: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0

    def __post_init__(self):
        for name in ("g", "length", "mass", "dt", "max_torque", "max_speed"):
            if getattr(self, name) <= 0:
                raise ValueError(f"pendulum parameter {name} must be positive")


@dataclass(frozen=True)
class PendulumState:
    theta: float
    omega: float

    @property
    def failed(self):
        return np.abs(self.theta) > FAILURE_ANGLE

    def as_array(self):
        return np.stack([np.asarray(self.theta, float), np.asarray(self.omega, float)], axis=-1)


@dataclass(frozen=True)
class Camera:
    size: int = 16
    noise_sigma: float = 0.3
    rod_frac: float = 0.45
    half_width: float = 1.0


@dataclass(frozen=True, eq=False)
class ObservationFrames:
    frames: np.ndarray
    noise_sigma: float

    def flat(self):
        return self.frames.reshape(-1)


def step(s, torque, params=PendulumParams()):
    torque = np.clip(torque, -params.max_torque, params.max_torque)
    gravity = -(3 * params.g / (2 * params.length)) * np.sin(s.theta + np.pi)
    drive = 3 * torque / (params.mass * params.length ** 2)
    omega = np.clip(s.omega + (gravity + drive) * params.dt, -params.max_speed, params.max_speed)
    return PendulumState(s.theta + s.omega * params.dt, omega)


def control(s_hat, params=PendulumParams()):
    """Rule-based balancing torque from a (possibly wrong) state estimate."""
    theta, omega = np.asarray(s_hat.theta, float), np.asarray(s_hat.omega, float)
    omega_target = np.sign(theta) * np.sqrt(60.0 * (1.0 - np.cos(theta)))
    torque = -2.0 * omega + (omega - omega_target)
    return np.clip(torque, -params.max_torque, params.max_torque)


def previous_state(s, params=PendulumParams()):
    """One backward Euler step, used to fake the earlier frame of a sampled state."""
    return PendulumState(s.theta - s.omega * params.dt, s.omega)


def _rod_frames(theta, camera):
    """Anti-aliased rod images for an array of angles, shape (n, size, size)."""
    theta = np.atleast_1d(np.asarray(theta, float))
    size = camera.size
    center = size / 2.0
    length = camera.rod_frac * size
    tip_x = center + length * np.sin(theta)
    tip_y = center - length * np.cos(theta)
    coords = np.arange(size) + 0.5
    px, py = np.meshgrid(coords, coords, indexing="xy")
    dx, dy = (tip_x - center)[:, None, None], (tip_y - center)[:, None, None]
    rx, ry = px[None] - center, py[None] - center
    along = np.clip((rx * dx + ry * dy) / (dx ** 2 + dy ** 2), 0.0, 1.0)
    dist = np.hypot(rx - along * dx, ry - along * dy)
    return np.clip(camera.half_width + 0.5 - dist, 0.0, 1.0)


def render_batch(theta, theta_prev, camera, rng):
    """Observation vectors for a batch: previous frame then current frame, flattened."""
    frames = np.stack([_rod_frames(theta_prev, camera), _rod_frames(theta, camera)], axis=1)
    if camera.noise_sigma > 0:
        frames = frames + rng.normal(0.0, camera.noise_sigma, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    return frames.reshape(frames.shape[0], -1)


def render(s, s_prev, noise_sigma=0.3, seed=0, size=16):
    camera = Camera(size=size, noise_sigma=noise_sigma)
    rng = np.random.default_rng(seed)
    flat = render_batch(s.theta, s_prev.theta, camera, rng)[0]
    return ObservationFrames(flat.reshape(2, size, size), noise_sigma)


def pendulum_error_model(theta_atoms=11, omega_atoms=11, sigma_theta=0.2, sigma_omega=0.5):
    """Additive-noise error atoms (two sigma each side) with Gaussian weights.

    Returns ``(errors, probs, error_grid)`` where ``errors`` has one row per
    (eps_theta, eps_omega) pair in row-major order of ``error_grid``.
    """
    eps_theta = symmetric_log_grid(2 * sigma_theta, theta_atoms, min_frac=1 / 16)
    eps_omega = symmetric_log_grid(2 * sigma_omega, omega_atoms, min_frac=1 / 16)
    error_grid = Grid((eps_theta, eps_omega), ("eps_theta", "eps_omega"))
    errors = error_grid.points()
    density = stats.norm.pdf(errors[:, 0], scale=sigma_theta) * stats.norm.pdf(errors[:, 1], scale=sigma_omega)
    return errors, density / density.sum(), error_grid


def state_grid(theta_points=41, omega_points=41, omega_range=2.0, min_frac=0.01):
    return Grid(
        (
            symmetric_log_grid(FAILURE_ANGLE, theta_points, min_frac),
            symmetric_log_grid(omega_range, omega_points, min_frac),
        ),
        ("theta", "omega"),
    )


def build_pendulum_mdp(params=PendulumParams(), horizon=20, grid=None, error_model=None):
    """Abstracted-perception MDP over s = [theta, omega] with ``t`` steps left.

    States at the failure angle are absorbing; the only cost is |theta| on the
    last step, so a fallen pendulum costs pi/4.
    """
    grid = grid or state_grid()
    errors, probs, error_grid = error_model or pendulum_error_model()

    def error_policy(t, states):
        return np.broadcast_to(probs, (len(states), len(probs)))

    def transition(t, states, e):
        s = PendulumState(states[:, 0], states[:, 1])
        s_hat = PendulumState(s.theta + errors[e, 0], s.omega + errors[e, 1])
        nxt = step(s, control(s_hat, params), params).as_array()
        absorbed = np.abs(s.theta) >= FAILURE_ANGLE - 1e-12
        nxt[absorbed] = states[absorbed]
        return nxt[:, None, :], np.ones((len(states), 1))

    def cost(t, states, e):
        if t > 0:
            return np.zeros(len(states))
        return np.minimum(np.abs(states[:, 0]), FAILURE_ANGLE)

    return AbstractedPerceptionMdp(
        grid=grid,
        errors=errors,
        error_policy=error_policy,
        transition=transition,
        cost=cost,
        horizon=horizon,
        discount=1.0,
        error_grid=error_grid,
        name="pendulum",
    )


def pendulum_cost_support(n_atoms=50):
    return log_cost_atoms(FAILURE_ANGLE, n_atoms)


def sample_initial_states(n, rng, theta_range=0.3, omega_range=0.2):
    """Evaluation starts: uniform over a box the saturated controller recovers from under perfect perception."""
    return PendulumState(rng.uniform(-theta_range, theta_range, n), rng.uniform(-omega_range, omega_range, n))


def simulate_closed_loop(initial, estimate, steps, camera, rng, params=PendulumParams()):
    """Run render -> estimate -> control -> step for a batch of pendulums.

    ``estimate(observations, true_states) -> estimates`` with states as (n, 2)
    arrays. Returns the time to failure per trajectory (``steps`` if it never fails).
    """
    s = initial
    prev = initial
    n = np.size(initial.theta)
    time_to_failure = np.full(n, steps)
    alive = np.ones(n, dtype=bool)
    for k in range(steps):
        obs = render_batch(s.theta, prev.theta, camera, rng)
        est = np.asarray(estimate(obs, s.as_array()), float)
        torque = control(PendulumState(est[:, 0], est[:, 1]), params)
        prev, s = s, step(s, torque, params)
        fell = alive & s.failed
        time_to_failure[fell] = k + 1
        alive &= ~fell
        if not alive.any():
            break
    return time_to_failure
