"""Pendulum perception: datasets, risk-aware training and mean time to failure."""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from algorithms import distdp, perceptnet
from algorithms.perceptnet import PerceptionNet
from features.pendulum import (
    FAILURE_ANGLE,
    Camera,
    PendulumParams,
    PendulumState,
    previous_state,
    render_batch,
    sample_initial_states,
    simulate_closed_loop,
    state_grid,
)

logger = logging.getLogger(__name__)

LABEL_SCALE = np.array([FAILURE_ANGLE, 8.0])


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    observations: np.ndarray
    states: np.ndarray
    labels: np.ndarray
    provenance: str
    scale: np.ndarray = LABEL_SCALE

    def __len__(self):
        return len(self.states)

    def unscale(self, labels):
        return np.asarray(labels) * self.scale


def generate_dataset(kind, n, table=None, alpha=0.0, camera=Camera(), seed=0, grid=None,
                     params=PendulumParams()):
    """Render ``n`` labeled observations at uniform or risk-weighted states."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    state_seed, render_seed = np.random.SeedSequence(seed).spawn(2)
    if kind == "uniform":
        grid = grid or (table.grid if table is not None else state_grid())
        states = distdp.sample_uniform_states(grid, n, np.random.default_rng(state_seed))
    elif kind == "risk_weighted":
        if table is None:
            raise ValueError("risk-weighted data needs a solved risk table")
        states = distdp.rejection_sample_states(table, alpha, n, state_seed)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    s = PendulumState(states[:, 0], states[:, 1])
    prev = previous_state(s, params)
    obs = render_batch(s.theta, prev.theta, camera, np.random.default_rng(render_seed))
    return LabeledDataset(obs, states, states / LABEL_SCALE, kind)


def new_net(camera=Camera(), hidden=(64, 64), seed=0):
    return PerceptionNet((2 * camera.size ** 2,) + tuple(hidden) + (2,), "tanh", seed=seed)


def train(net, dataset, config, table=None, progress=False):
    """Fit ``net`` to the dataset with the baseline or the risk-sensitive loss."""
    if config.loss == "risk" and table is None:
        raise ValueError("the risk-sensitive loss needs a risk table")
    # risk is divided by the largest cost so a certain fall weighs like a unit squared error
    risk_scale = float(table.cost_support[-1]) if table is not None else 1.0
    scale = dataset.scale

    def loss_fn(batch, out):
        s = dataset.states[batch]
        s_hat = out * scale
        if config.loss == "risk":
            loss, grad = perceptnet.risk_loss_and_grad(s, s_hat, table, config.alpha, config.lam, risk_scale)
        else:
            loss, grad = perceptnet.mse_and_grad(s, s_hat)
        return loss, grad * scale

    return perceptnet.fit(net, dataset.observations, loss_fn, config, progress=progress)


class NetEstimator:
    def __init__(self, net, scale=LABEL_SCALE):
        self.net = net
        self.scale = scale

    def __call__(self, observations, states):
        return self.net.forward(observations) * self.scale


class PerfectEstimator:
    def __call__(self, observations, states):
        return states


class ConstantEstimator:
    def __init__(self, value=(0.0, 0.0)):
        self.value = np.asarray(value, float)

    def __call__(self, observations, states):
        return np.broadcast_to(self.value, states.shape)


@dataclass(frozen=True)
class MttfResult:
    trial_means: tuple
    mean: float
    se: float

    def __str__(self):
        return f"{self.mean:.0f} ± {self.se:.0f}"


def _trial(estimator, n_traj, horizon, camera, seed, params):
    rng = np.random.default_rng(seed)
    initial = sample_initial_states(n_traj, rng)
    return float(simulate_closed_loop(initial, estimator, horizon, camera, rng, params).mean())


def evaluate_mttf(estimator, n_traj=100, horizon=500, n_trials=5, seed=0, camera=Camera(), jobs=1,
                  params=PendulumParams()):
    """Mean time to failure per trial, then mean and standard error across trials."""
    seeds = np.random.SeedSequence(seed).spawn(n_trials)
    args = [(estimator, n_traj, horizon, camera, s, params) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            means = list(pool.map(_trial, *zip(*args)))
    else:
        means = [_trial(*a) for a in args]
    means = np.asarray(means)
    se = float(means.std(ddof=1) / math.sqrt(n_trials)) if n_trials > 1 else 0.0
    return MttfResult(tuple(means.tolist()), float(means.mean()), se)


def signed_error_summary(estimator, states, camera=Camera(), seed=0, params=PendulumParams()):
    """Mean signed estimation error per state dimension over rendered ``states``."""
    states = np.atleast_2d(np.asarray(states, float))
    s = PendulumState(states[:, 0], states[:, 1])
    obs = render_batch(s.theta, previous_state(s, params).theta, camera, np.random.default_rng(seed))
    return np.mean(np.asarray(estimator(obs, states)) - states, axis=0)
