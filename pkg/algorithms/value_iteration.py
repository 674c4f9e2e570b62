"""Finite-horizon value iteration on a grid with multilinear interpolation."""
import logging
import time

import numpy as np

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12


def greedy(q, tolerance=TIE_TOLERANCE):
    """Index of the minimum along the last axis, preferring lower indices on ties."""
    best = q.min(axis=-1, keepdims=True)
    return np.argmax(q <= best + tolerance, axis=-1)


def value_iteration(grid, n_actions, transition, stage_cost, terminal_cost, horizon):
    """Backward induction over ``horizon`` steps-left slices.

    - ``transition(t, states, a) -> (next_states (n, k, d), probs (n, k))``
    - ``stage_cost(t, states, a) -> (n,)``
    - ``terminal_cost(states) -> (n,)`` (value at ``t = 0``)

    Returns Q with shape ``(horizon + 1, grid.size, n_actions)``; slice 0 holds
    the terminal cost for every action.
    """
    start = time.perf_counter()
    points = grid.points()
    n, dim = points.shape
    q = np.empty((horizon + 1, n, n_actions))
    value = np.asarray(terminal_cost(points), dtype=float)
    q[0] = value[:, None]
    for t in range(1, horizon + 1):
        for a in range(n_actions):
            nxt, p = transition(t, points, a)
            nxt = np.asarray(nxt, float).reshape(n, -1, dim)
            p = np.asarray(p, float).reshape(n, -1)
            index, weight = grid.interpolants(nxt.reshape(-1, dim))
            weight = (weight * p.reshape(-1, 1)).reshape(n, -1)
            expected = np.sum(weight * value[index.reshape(n, -1)], axis=1)
            q[t, :, a] = np.asarray(stage_cost(t, points, a), float) + expected
        value = q[t].min(axis=1)
    logger.info("value iteration: %d slices x %d states x %d actions in %.2fs",
                horizon, n, n_actions, time.perf_counter() - start)
    return q
