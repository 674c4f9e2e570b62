"""Distributional dynamic programming over abstracted-perception MDPs.

In an abstracted-perception MDP the "action" is the perception error: at each
step an error index is drawn from the notional error model, the controller acts
on the perceived state and the environment moves. ``solve`` sweeps backwards
over the steps-left axis and returns a ``RiskTable`` holding, for every grid
state and error, the categorical distribution of the cost still to come. Risk
queries are CVaR reads of that table, interpolated between grid points.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import psutil

from algorithms import riskcore
from algorithms.grid import Grid
from utils.errors import DegenerateWeightError, DistributionError, UnknownErrorAtomError

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-9
CLAMP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AbstractedPerceptionMdp:
    """Problem definition for the risk solve.

    The callables are vectorized over grid states. ``t`` is the number of steps
    left (0 on the last step of the episode).

    - ``error_policy(t, states) -> (n, n_errors)`` probabilities.
    - ``transition(t, states, e) -> (next_states (n, k, d), probs (n, k))``.
    - ``cost(t, states, e) -> (n,)``.
    """

    grid: Grid
    errors: np.ndarray
    error_policy: Callable
    transition: Callable
    cost: Callable
    horizon: int
    discount: float = 1.0
    error_grid: Optional[Grid] = None
    name: str = "mdp"

    @property
    def n_errors(self):
        return len(self.errors)


@dataclass
class SolverReport:
    wall_time: float = 0.0
    memory_delta: int = 0
    clamped: int = 0
    slices: int = 0
    states: int = 0
    errors: int = 0

    def as_row(self):
        return {
            "wall_time_s": self.wall_time,
            "memory_kb": self.memory_delta / 1024,
            "clamped_cells": self.clamped,
            "slices": self.slices,
            "states": self.states,
            "errors": self.errors,
        }


@dataclass(frozen=True, eq=False)
class RiskTable:
    """Per (grid state, error) cost distributions sharing one cost support.

    ``probs`` has shape ``grid.shape + (n_errors, n_atoms)``.
    """

    grid: Grid
    errors: np.ndarray
    cost_support: np.ndarray
    probs: np.ndarray
    error_grid: Optional[Grid] = None
    meta: dict = field(default_factory=dict)
    report: Optional[SolverReport] = field(default=None, compare=False)
    _fields: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        errors = np.asarray(self.errors, dtype=float)
        if errors.ndim == 1:
            errors = errors[:, None]
        object.__setattr__(self, "errors", errors)
        object.__setattr__(self, "cost_support", np.asarray(self.cost_support, dtype=float))
        expected = self.grid.shape + (len(errors), self.cost_support.size)
        if self.probs.shape != expected:
            raise DistributionError(f"probability array has shape {self.probs.shape}, expected {expected}")

    @property
    def n_errors(self):
        return len(self.errors)

    def distribution(self, grid_index, error):
        e = self.error_index(error)
        return riskcore.CategoricalDistribution(self.cost_support, self.probs[tuple(grid_index)][e])

    def error_index(self, error):
        if isinstance(error, (int, np.integer)):
            if not 0 <= error < self.n_errors:
                raise UnknownErrorAtomError(f"error index {error} out of range 0..{self.n_errors - 1}")
            return int(error)
        atom = np.atleast_1d(np.asarray(error, dtype=float))
        hits = np.flatnonzero(np.all(np.isclose(self.errors, atom, rtol=0.0, atol=1e-9), axis=1))
        if hits.size == 0:
            raise UnknownErrorAtomError(f"{atom.tolist()} is not one of the table's error atoms")
        return int(hits[0])

    def zero_error_index(self):
        hits = np.flatnonzero(np.all(np.abs(self.errors) <= 1e-12, axis=1))
        return int(hits[0]) if hits.size else None

    def cvar_field(self, alpha):
        """CVaR for every stored cell, shape ``grid.shape + (n_errors,)``; cached per alpha."""
        alpha = riskcore.check_alpha(alpha)
        if alpha not in self._fields:
            self._fields[alpha] = riskcore.cvar_array(self.cost_support, self.probs, alpha)
        return self._fields[alpha]

    def expected_field(self):
        return self.cvar_field(0.0)


# -- solver ----------------------------------------------------------------


def _check_rows(probs, what, t):
    sums = probs.sum(axis=-1)
    bad = np.abs(sums - 1.0) > NORMALIZATION_TOLERANCE
    if np.any(bad):
        raise DistributionError(f"{what} probabilities at t={t} do not sum to 1 (worst {sums[bad][0]:.12f})")


def _slice_for_error(mdp, t, points, e, support, zbar_next):
    n_states, dim = points.shape
    cost = np.asarray(mdp.cost(t, points, e), dtype=float)
    clamped = int(np.sum((cost < support[0] - CLAMP_TOLERANCE) | (cost > support[-1] + CLAMP_TOLERANCE)))
    if zbar_next is None:
        return riskcore.project_array(support, cost[:, None], np.ones((n_states, 1))), clamped

    nxt, p = mdp.transition(t, points, e)
    nxt = np.asarray(nxt, dtype=float).reshape(n_states, -1, dim)
    p = np.asarray(p, dtype=float).reshape(n_states, -1)
    _check_rows(p, "transition", t)
    index, weight = mdp.grid.interpolants(nxt.reshape(-1, dim))
    weight = weight * p.reshape(-1, 1)
    index = index.reshape(n_states, -1)
    weight = weight.reshape(n_states, -1)
    mixed = np.einsum("sk,ska->sa", weight, zbar_next[index])

    if mdp.discount == 1.0 and not np.any(cost):
        return mixed, clamped
    values = cost[:, None] + mdp.discount * support[None, :]
    outside = (values < support[0] - CLAMP_TOLERANCE) | (values > support[-1] + CLAMP_TOLERANCE)
    clamped += int(np.sum(np.any(outside & (mixed > 0), axis=1)))
    return riskcore.project_array(support, values, mixed), clamped


def solve(mdp, cost_support, keep_slices="last", jobs=1):
    """Backward distributional sweep over ``mdp.horizon`` steps.

    ``keep_slices="last"`` keeps only the full-horizon slice (``t = horizon - 1``);
    ``"all"`` keeps every slice and prepends a discrete ``t`` axis to the table grid.
    """
    if keep_slices not in ("last", "all"):
        raise ValueError(f"keep_slices must be 'last' or 'all', got {keep_slices!r}")
    support = np.asarray(cost_support, dtype=float)
    if np.any(np.diff(support) <= 0):
        raise DistributionError("cost support must be strictly increasing")

    process = psutil.Process()
    mem_before = process.memory_info().rss
    start = time.perf_counter()

    points = mdp.grid.points()
    n_states, n_errors, n_atoms = points.shape[0], mdp.n_errors, support.size
    report = SolverReport(slices=mdp.horizon, states=n_states, errors=n_errors)
    kept = []
    zbar_next = None

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for t in range(mdp.horizon):
            z = np.empty((n_states, n_errors, n_atoms))
            results = pool.map(
                lambda e: _slice_for_error(mdp, t, points, e, support, zbar_next), range(n_errors)
            )
            for e, (dist, clamped) in enumerate(results):
                z[:, e] = dist
                report.clamped += clamped

            policy = np.asarray(mdp.error_policy(t, points), dtype=float).reshape(n_states, n_errors)
            _check_rows(policy, "error policy", t)
            zbar_next = np.einsum("se,sea->sa", policy, z)

            if keep_slices == "all":
                kept.append(z)
            elif t == mdp.horizon - 1:
                kept = [z]
            logger.debug("%s: solved slice t=%d", mdp.name, t)

    report.wall_time = time.perf_counter() - start
    report.memory_delta = process.memory_info().rss - mem_before
    if report.clamped:
        logger.warning("%s: %d cells had cost mass clamped to the support range", mdp.name, report.clamped)
    logger.info("%s: solved %d slices x %d states x %d errors in %.2fs",
                mdp.name, mdp.horizon, n_states, n_errors, report.wall_time)

    if keep_slices == "all":
        grid = mdp.grid.prepend(np.arange(mdp.horizon, dtype=float), "t", discrete=True)
        probs = np.stack(kept).reshape(grid.shape + (n_errors, n_atoms))
        meta = {"problem": mdp.name, "slices": "all"}
    else:
        grid = mdp.grid
        probs = kept[0].reshape(grid.shape + (n_errors, n_atoms))
        meta = {"problem": mdp.name, "slices": "last", "t": mdp.horizon - 1}
    meta.update(horizon=mdp.horizon, discount=mdp.discount, clamped=report.clamped)
    return RiskTable(grid, np.asarray(mdp.errors), support, probs, mdp.error_grid, meta, report)


# -- queries ---------------------------------------------------------------


def risk_batch(table, states, error, alpha):
    """Risk of one error at many states, shape (n,)."""
    e = table.error_index(error)
    field_e = table.cvar_field(alpha)[..., e]
    return table.grid.interpolate(field_e, states)


def risk_all_errors(table, states, alpha):
    """Risk of every error atom at many states, shape (n, n_errors)."""
    return table.grid.interpolate(table.cvar_field(alpha), states)


def risk(table, s, eps, alpha):
    return float(risk_batch(table, np.atleast_2d(s), eps, alpha)[0])


def _joint_grid(table):
    if table.error_grid is None:
        raise ValueError("continuous error queries need a table whose error atoms form a product grid")
    return table.grid.concat(table.error_grid)


def risk_and_gradient(table, states, eps, alpha):
    """Risk at continuous errors and its gradient with respect to the error.

    The risk surface is multilinear between error atoms, so the gradient is
    piecewise constant; errors outside the atom hull are clamped and get zero
    slope along the clamped coordinates.
    """
    joint = _joint_grid(table)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    values = table.cvar_field(alpha).reshape(-1)
    index, weight, dweight = joint.interpolants(np.hstack([states, eps]), gradient=True)
    corner = values[index]
    value = np.sum(weight * corner, axis=1)
    grad = np.einsum("nk,nkd->nd", corner, dweight)[:, table.grid.ndim:]
    return value, grad


def risk_gradient(table, s, eps, alpha):
    _, grad = risk_and_gradient(table, np.atleast_2d(s), np.atleast_2d(eps), alpha)
    return grad[0]


def _zero_risk(table, states, alpha, per_error):
    zero = table.zero_error_index()
    if zero is not None:
        return per_error[:, zero]
    if table.error_grid is None:
        raise ValueError("weighting needs a zero error atom or an interpolable error grid")
    value, _ = risk_and_gradient(table, states, np.zeros((len(states), table.errors.shape[1])), alpha)
    return value


def risk_weight_batch(table, states, alpha):
    states = np.atleast_2d(np.asarray(states, dtype=float))
    per_error = risk_all_errors(table, states, alpha)
    return per_error.max(axis=1) - _zero_risk(table, states, alpha, per_error)


def risk_weight(table, s, alpha):
    return float(risk_weight_batch(table, s, alpha)[0])


def risk_weight_field(table, alpha):
    """Weight at every grid point, shape ``grid.shape``."""
    return risk_weight_batch(table, table.grid.points(), alpha).reshape(table.grid.shape)


def sample_uniform_states(grid, n, rng):
    cols = []
    for axis, is_discrete in zip(grid.axes, grid.discrete):
        if is_discrete:
            cols.append(rng.choice(axis, size=n))
        else:
            cols.append(rng.uniform(axis[0], axis[-1], size=n))
    return np.stack(cols, axis=-1)


def rejection_sample_states(table, alpha, n, rng_seed, batch=4096):
    """Draw ``n`` states with density proportional to the risk weight.

    The proposal is uniform over the grid ranges; the envelope is the largest
    weight at a grid point, which bounds the interpolated weight everywhere.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    envelope = float(np.max(risk_weight_field(table, alpha)))
    if envelope <= 0.0:
        raise DegenerateWeightError("risk weight is zero everywhere; nothing to sample from")
    rng = np.random.default_rng(rng_seed)
    accepted, drawn, total = [], 0, 0
    while total < n:
        proposal = sample_uniform_states(table.grid, batch, rng)
        weight = risk_weight_batch(table, proposal, alpha)
        keep = rng.uniform(size=batch) * envelope < weight
        accepted.append(proposal[keep])
        total += int(keep.sum())
        drawn += batch
    logger.debug("rejection sampling accepted %d of %d proposals", total, drawn)
    return np.concatenate(accepted)[:n]


def marginalize(table, axes, weights):
    """Mix the table's distributions over ``axes`` with ``weights`` (shape of those axes)."""
    axes = tuple(axes)
    positions = [table.grid.names.index(a) for a in axes]
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > NORMALIZATION_TOLERANCE:
        raise DistributionError(f"marginal weights sum to {weights.sum():.12f}, expected 1")
    probs = np.tensordot(table.probs, weights, axes=(positions, list(range(len(positions)))))
    meta = dict(table.meta, marginalized=list(axes))
    return RiskTable(table.grid.drop(axes), table.errors, table.cost_support, probs,
                     table.error_grid, meta, table.report)


# -- sampling checks -------------------------------------------------------


def rollout_returns(mdp, t, state, error, n, seed):
    """Monte Carlo returns of the discretized chain started at a grid state.

    Next states are snapped to a grid neighbor drawn with its interpolation
    weight, which is the chain the solver evaluates.
    """
    rng = np.random.default_rng(seed)
    points = mdp.grid.points()
    state_idx = np.full(n, int(np.argmin(np.abs(points - np.asarray(state, dtype=float)).sum(axis=1))))
    err = np.full(n, int(error))
    returns = np.zeros(n)
    scale = 1.0
    for step in range(t, -1, -1):
        for e in np.unique(err):
            rows = err == e
            returns[rows] += scale * np.asarray(mdp.cost(step, points[state_idx[rows]], int(e)))
        if step == 0:
            break
        new_idx = np.empty_like(state_idx)
        for e in np.unique(err):
            rows = np.flatnonzero(err == e)
            nxt, p = mdp.transition(step, points[state_idx[rows]], int(e))
            nxt = np.asarray(nxt).reshape(len(rows), -1, points.shape[1])
            p = np.asarray(p).reshape(len(rows), -1)
            index, weight = mdp.grid.interpolants(nxt.reshape(-1, points.shape[1]))
            index = index.reshape(len(rows), -1)
            weight = (weight * p.reshape(-1, 1)).reshape(len(rows), -1)
            cdf = np.cumsum(weight, axis=1)
            pick = (rng.uniform(size=(len(rows), 1)) * cdf[:, -1:] > cdf).sum(axis=1)
            new_idx[rows] = index[np.arange(len(rows)), np.minimum(pick, index.shape[1] - 1)]
        state_idx = new_idx
        policy = np.asarray(mdp.error_policy(step - 1, points[state_idx]))
        cdf = np.cumsum(policy, axis=1)
        err = (rng.uniform(size=(n, 1)) * cdf[:, -1:] > cdf).sum(axis=1)
        err = np.minimum(err, mdp.n_errors - 1)
        scale *= mdp.discount
    return returns


def enumerate_returns(mdp, t, state_index, error):
    """Every (return, probability) of the discretized chain, by brute force."""
    points = mdp.grid.points()
    dim = points.shape[1]

    def expand(step, idx, e):
        cost = float(np.asarray(mdp.cost(step, points[idx][None, :], e))[0])
        if step == 0:
            return [(cost, 1.0)]
        nxt, p = mdp.transition(step, points[idx][None, :], e)
        nxt = np.asarray(nxt).reshape(-1, dim)
        p = np.asarray(p).reshape(-1)
        index, weight = mdp.grid.interpolants(nxt)
        outcomes = []
        for k in range(len(p)):
            for j, w in zip(index[k], weight[k]):
                if p[k] * w == 0:
                    continue
                policy = np.asarray(mdp.error_policy(step - 1, points[j][None, :]))[0]
                for e_next, pe in enumerate(policy):
                    if pe == 0:
                        continue
                    for ret, q in expand(step - 1, j, e_next):
                        outcomes.append((cost + mdp.discount * ret, p[k] * w * pe * q))
        return outcomes

    return expand(t, int(state_index), int(error))
