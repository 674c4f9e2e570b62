import numpy as np
import pytest

from algorithms import distdp
from algorithms.distdp import AbstractedPerceptionMdp
from algorithms.grid import Grid
from features import daa, encounters, pendulum


def make_micro_mdp(seed, max_states=5, max_errors=3, max_horizon=4, max_cost=2):
    """Random MDP on an integer line whose successors land on grid points and whose costs are integers.

    With integer costs and an integer support the categorical projection is
    exact, so the solver must agree with brute-force enumeration.
    """
    rng = np.random.default_rng(seed)
    n_states = int(rng.integers(1, max_states + 1))
    n_errors = int(rng.integers(1, max_errors + 1))
    horizon = int(rng.integers(1, max_horizon + 1))
    n_next = 2
    axis = np.arange(n_states, dtype=float)
    next_index = rng.integers(0, n_states, size=(horizon, n_states, n_errors, n_next))
    next_probs = rng.dirichlet(np.ones(n_next), size=(horizon, n_states, n_errors))
    costs = rng.integers(0, max_cost + 1, size=(horizon, n_states, n_errors)).astype(float)
    policy = rng.dirichlet(np.ones(n_errors), size=(horizon, n_states))

    def index(states):
        return np.rint(states[:, 0]).astype(int)

    mdp = AbstractedPerceptionMdp(
        grid=Grid((axis,), ("x",)),
        errors=np.arange(n_errors, dtype=float)[:, None],
        error_policy=lambda t, states: policy[t, index(states)],
        transition=lambda t, states, e: (axis[next_index[t, index(states), e]][..., None],
                                         next_probs[t, index(states), e]),
        cost=lambda t, states, e: costs[t, index(states), e],
        horizon=horizon,
        name=f"micro-{seed}",
    )
    support = np.arange(max_cost * horizon + 1, dtype=float)
    return mdp, support


@pytest.fixture
def micro_mdp():
    return make_micro_mdp


@pytest.fixture
def two_state_table():
    """Hand-built table over one continuous axis with a zero error and a harmful error."""
    grid = Grid((np.array([0.0, 1.0]),), ("x",))
    support = np.array([0.0, 10.0])
    probs = np.array([
        [[1.0, 0.0], [0.5, 0.5]],
        [[0.8, 0.2], [0.0, 1.0]],
    ])
    return distdp.RiskTable(grid, np.array([[0.0], [1.0]]), support, probs)


@pytest.fixture(scope="session")
def pendulum_table():
    mdp = pendulum.build_pendulum_mdp(grid=pendulum.state_grid(21, 21))
    return distdp.solve(mdp, pendulum.pendulum_cost_support(50))


@pytest.fixture(scope="session")
def daa_policy():
    return daa.solve_controller()


@pytest.fixture(scope="session")
def daa_tables(daa_policy):
    """(marginal, full) DAA risk tables with occupancy from a short perfect-perception run."""
    return encounters.build_marginal_risk_table(daa_policy, n_occupancy=100, seed=0)
