"""Detect and avoid: vertical collision-avoidance controller, detection model and risk MDP.

State convention (relative to a single intruder):

- ``p``      intruder detected (1) or not (0)
- ``h``      ownship altitude minus intruder altitude, m
- ``hdot``   relative vertical rate, m/s
- ``a_prev`` previous advisory
- ``tau``    seconds until horizontal separation is lost

The controller only ever sees ``p = 1`` states in its table; with ``p = 0`` it
answers COC.
"""
import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from algorithms import distdp
from algorithms.distdp import AbstractedPerceptionMdp
from algorithms.grid import Grid, symmetric_log_grid
from algorithms.value_iteration import greedy, value_iteration

logger = logging.getLogger(__name__)

MAX_TAU = 41
DAA_COST_CAP = 150.0
ALERT_TOLERANCE = 1e-9


class Advisory(enum.IntEnum):
    COC = 0
    CLIMB = 1
    DESCEND = 2


COMMANDED_RATE = np.array([0.0, 8.0, -8.0])


@dataclass(frozen=True)
class DaaState:
    p: int
    h: float
    hdot: float
    a_prev: Advisory
    tau: int


@dataclass(frozen=True)
class DaaDynamics:
    a_max: float = 3.0
    dt: float = 1.0
    hdot_limit: float = 10.0
    noise: tuple = (-0.5, 0.0, 0.5)
    noise_probs: tuple = (0.1, 0.8, 0.1)

    def __post_init__(self):
        if self.a_max <= 0 or self.dt <= 0:
            raise ValueError("a_max and dt must be positive")
        if len(self.noise) != len(self.noise_probs) or abs(sum(self.noise_probs) - 1.0) > 1e-9:
            raise ValueError("vertical-rate noise values and probabilities must align and sum to 1")


@dataclass(frozen=True)
class ControllerCostConfig:
    nmac_cost: float = 1.0
    nmac_threshold: float = 50.0
    alert_cost: float = 0.005
    reversal_cost: float = 0.01

    def __post_init__(self):
        if min(self.nmac_cost, self.nmac_threshold) <= 0 or min(self.alert_cost, self.reversal_cost) < 0:
            raise ValueError("controller costs must be non-negative and the NMAC cost positive")


def next_rate(hdot, u, w, dynamics=DaaDynamics()):
    """Vertical rate after one step: toward the commanded rate within a_max, then noise."""
    u = np.asarray(u, dtype=int)
    hdot = np.asarray(hdot, dtype=float)
    step = dynamics.a_max * dynamics.dt
    accel = np.where(u == Advisory.COC, 0.0, np.clip(COMMANDED_RATE[u] - hdot, -step, step))
    return np.clip(hdot + accel + w, -dynamics.hdot_limit, dynamics.hdot_limit)


def daa_step(s, u, w, dynamics=DaaDynamics()):
    if s.tau < 1:
        raise ValueError("cannot step a DAA state with tau = 0; the encounter is over")
    hdot = float(next_rate(s.hdot, int(u), w, dynamics))
    return DaaState(s.p, s.h + s.hdot * dynamics.dt, hdot, Advisory(int(u)), s.tau - 1)


def controller_grid(h_points=41, hdot_points=21, h_range=300.0, hdot_range=10.0, min_frac=0.01):
    return Grid(
        (
            symmetric_log_grid(h_range, h_points, min_frac),
            symmetric_log_grid(hdot_range, hdot_points, min_frac * 10),
            np.arange(len(Advisory), dtype=float),
        ),
        ("h", "hdot", "a_prev"),
        (False, False, True),
    )


def _successors(states, u, dynamics):
    """Next (h, hdot, a_prev) for every noise outcome: ((n, k, 3), (n, k))."""
    h, hdot = states[:, 0], states[:, 1]
    u = np.broadcast_to(np.asarray(u, dtype=int), h.shape)
    noise = np.asarray(dynamics.noise, dtype=float)
    nxt = np.empty((len(states), noise.size, 3))
    nxt[:, :, 0] = (h + hdot * dynamics.dt)[:, None]
    nxt[:, :, 1] = next_rate(hdot[:, None], u[:, None], noise[None, :], dynamics)
    nxt[:, :, 2] = u[:, None]
    probs = np.broadcast_to(np.asarray(dynamics.noise_probs, dtype=float), (len(states), noise.size))
    return nxt, probs


def _is_reversal(u, a_prev):
    return ((u == Advisory.CLIMB) & (a_prev == Advisory.DESCEND)) | ((u == Advisory.DESCEND) & (a_prev == Advisory.CLIMB))


@dataclass(frozen=True, eq=False)
class DaaPolicy:
    """Action values per (tau, h, hdot, a_prev, advisory) and the greedy advisories.

    ``q`` has shape ``(MAX_TAU + 1,) + grid.shape + (3,)``.
    """

    grid: Grid
    q: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        expected = self.grid.shape + (len(Advisory),)
        if q.shape[1:] != expected:
            raise ValueError(f"action values have shape {q.shape}, expected (n_tau,) + {expected}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "advisories", greedy(q))
        object.__setattr__(self, "_tau_grid", self.grid.prepend(np.arange(q.shape[0], dtype=float), "tau"))

    @property
    def max_tau(self):
        return self.q.shape[0] - 1

    def alert_optimal(self, tolerance=ALERT_TOLERANCE):
        """Cells where some alert is within ``tolerance`` of the best action value.

        Unlike ``advisories`` this ignores the COC-first tie-break, so exact ties
        between COC and an alert count as alerting.
        """
        best = self.q.min(axis=-1)
        return self.q[..., Advisory.CLIMB:].min(axis=-1) <= best + tolerance

    def advise(self, p, h, hdot, a_prev, tau):
        """Advisories for (batches of) states; off-grid h and hdot interpolate Q."""
        p, h, hdot, a_prev, tau = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (p, h, hdot, a_prev, tau)))
        points = np.stack([tau.ravel(), h.ravel(), hdot.ravel(), a_prev.ravel()], axis=-1)
        q = self._tau_grid.interpolate(self.q, points)
        u = greedy(q)
        u[(p.ravel() == 0) | (tau.ravel() <= 0)] = Advisory.COC
        return u.reshape(p.shape) if p.ndim else int(u[0])

    def __call__(self, s):
        return Advisory(self.advise(s.p, s.h, s.hdot, int(s.a_prev), s.tau))


def solve_controller(costs=ControllerCostConfig(), dynamics=DaaDynamics(), grid=None, max_tau=MAX_TAU):
    """Optimal advisory table by backward induction over tau."""
    grid = grid or controller_grid()

    def transition(t, states, u):
        return _successors(states, u, dynamics)

    def stage_cost(t, states, u):
        a_prev = states[:, 2].astype(int)
        return costs.alert_cost * (u != Advisory.COC) + costs.reversal_cost * _is_reversal(u, a_prev)

    def terminal_cost(states):
        return costs.nmac_cost * (np.abs(states[:, 0]) < costs.nmac_threshold)

    q = value_iteration(grid, len(Advisory), transition, stage_cost, terminal_cost, max_tau)
    q = q.reshape((max_tau + 1,) + grid.shape + (len(Advisory),))
    meta = {"costs": asdict(costs), "dynamics": {k: list(v) if isinstance(v, tuple) else v
                                                 for k, v in asdict(dynamics).items()}}
    return DaaPolicy(grid, q, meta)


def policy_slice(policy, hdot=0.0, a_prev=Advisory.COC):
    """Advisory over (tau, h) at fixed hdot and previous advisory, as a long frame."""
    h_axis = policy.grid.axis("h")
    taus = np.arange(policy.max_tau + 1)
    tt, hh = np.meshgrid(taus, h_axis, indexing="ij")
    u = policy.advise(1, hh, hdot, int(a_prev), tt)
    return pd.DataFrame({"tau": tt.ravel(), "h": hh.ravel(),
                         "advisory": [Advisory(int(a)).name for a in u.ravel()]})


def alert_width(policy, tau, hdot=0.0, a_prev=Advisory.COC):
    """Number of h grid points where the policy alerts at this tau."""
    h_axis = policy.grid.axis("h")
    u = policy.advise(1, h_axis, hdot, int(a_prev), np.full_like(h_axis, tau))
    return int(np.sum(u != Advisory.COC))


# -- detection error model ---------------------------------------------------


@dataclass(frozen=True)
class DetectionModel:
    """Probability of detecting the intruder as a function of (|h|, tau).

    Zero outside the camera cone ``|h| > cone_slope * (tau + cone_offset)``;
    inside it a logistic in inverse slant range, where the horizontal range is
    ``range_offset + closure_speed * tau``.
    """

    cone_slope: float = 30.0
    cone_offset: float = 1.0
    p_max: float = 0.95
    range_half: float = 2000.0
    sharpness: float = 4.0
    closure_speed: float = 90.0
    range_offset: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError("p_max must lie in [0, 1]")

    def __call__(self, abs_h, tau):
        abs_h = np.abs(np.asarray(abs_h, dtype=float))
        tau = np.asarray(tau, dtype=float)
        slant = np.hypot(abs_h, self.range_offset + self.closure_speed * tau)
        p = self.p_max * expit(self.sharpness * (self.range_half / slant - 1.0))
        return np.where(abs_h > self.cone_slope * (tau + self.cone_offset), 0.0, p)


def detection_probability(model, h, tau):
    p = model(np.abs(h), tau)
    return float(p) if np.ndim(p) == 0 else p


def detection_table(model, h_axis=None, max_tau=MAX_TAU):
    h_axis = controller_grid().axis("h") if h_axis is None else np.asarray(h_axis, float)
    taus = np.arange(max_tau + 1)
    tt, hh = np.meshgrid(taus, h_axis, indexing="ij")
    return pd.DataFrame({"tau": tt.ravel(), "h": hh.ravel(), "p_detect": model(np.abs(hh), tt).ravel()})


# -- risk MDP ----------------------------------------------------------------

DETECTED, MISSED = 0, 1


def daa_cost_support(n_atoms=50, upper=DAA_COST_CAP):
    return np.linspace(0.0, upper, n_atoms)


def build_daa_risk_mdp(policy, model=DetectionModel(), dynamics=DaaDynamics()):
    """Abstracted-perception MDP over (h, hdot, a_prev) with ``t = tau``.

    Error 0 means the intruder is detected; error 1 means it is missed, so the
    controller sees ``p = 0`` and answers COC.
    """

    def error_policy(t, states):
        p = model(np.abs(states[:, 0]), t)
        return np.stack([p, 1.0 - p], axis=-1)

    def transition(t, states, e):
        perceived = 1 - e
        u = policy.advise(perceived, states[:, 0], states[:, 1], states[:, 2], np.full(len(states), t))
        return _successors(states, u, dynamics)

    def cost(t, states, e):
        if t > 0:
            return np.zeros(len(states))
        return np.clip(DAA_COST_CAP - np.abs(states[:, 0]), 0.0, DAA_COST_CAP)

    return AbstractedPerceptionMdp(
        grid=policy.grid,
        errors=np.array([[DETECTED], [MISSED]], dtype=float),
        error_policy=error_policy,
        transition=transition,
        cost=cost,
        horizon=policy.max_tau + 1,
        name="daa",
    )


def solve_daa_risk(policy, model=DetectionModel(), dynamics=DaaDynamics(), n_atoms=50, jobs=1):
    """Full risk table over (t, h, hdot, a_prev); marginalize it before querying by (tau, h)."""
    mdp = build_daa_risk_mdp(policy, model, dynamics)
    return distdp.solve(mdp, daa_cost_support(n_atoms), keep_slices="all", jobs=jobs)


def marginal_risk_table(table, weights):
    """Mix out hdot and a_prev with occupancy ``weights`` of shape (n_hdot, n_advisories)."""
    return distdp.marginalize(table, ("hdot", "a_prev"), weights)


def objectness_risk(table, s, p_hat, alpha):
    """Risk of an objectness score, linear between the detected and missed risks.

    ``s`` holds (tau, h) rows. Returns ``(risk, d risk / d p_hat)``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    q = distdp.risk_all_errors(table, s, alpha)
    p_hat = np.asarray(p_hat, dtype=float)
    slope = q[:, DETECTED] - q[:, MISSED]
    return q[:, MISSED] + p_hat * slope, slope


def daa_risk_weight_field(table, alpha):
    """Missed-minus-detected risk at every (tau, h) grid point of a marginal table."""
    return distdp.risk_weight_field(table, alpha)
