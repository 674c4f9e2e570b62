"""Pairwise straight-line encounters, closed-loop simulation and safety metrics."""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from algorithms import distdp
from algorithms.grid import Grid
from features import daa
from features.daa import Advisory, DaaDynamics, DetectionModel
from features.daa_vision import precision_recall, render_views

logger = logging.getLogger(__name__)

CPA_TIME = 40
DURATION = 50
NMAC_VERTICAL = 50.0
NMAC_HORIZONTAL = 100.0

FEATURE_RANGES = {
    "ownship_speed": (45.0, 55.0),
    "intruder_speed": (45.0, 55.0),
    "hmd": (0.0, 100.0),
    "vmd": (-50.0, 50.0),
    "relative_heading": (120.0, 240.0),
}


@dataclass(frozen=True)
class EncounterFeatures:
    ownship_speed: float
    intruder_speed: float
    hmd: float
    vmd: float
    relative_heading: float


@dataclass(frozen=True, eq=False)
class Encounter:
    """Nominal (unalerted) trajectories sampled once per second, ownship flying along +x."""

    features: EncounterFeatures
    times: np.ndarray
    own_xy: np.ndarray
    intruder_xy: np.ndarray
    own_z: np.ndarray
    own_rate: np.ndarray
    intruder_z: float

    def horizontal_separation(self):
        return np.hypot(*(self.intruder_xy - self.own_xy).T)


def sample_features(rng):
    return EncounterFeatures(**{k: float(rng.uniform(lo, hi)) for k, (lo, hi) in FEATURE_RANGES.items()})


def sample_encounter(seed, rate_sigma=0.5):
    rng = np.random.default_rng(seed)
    f = sample_features(rng)
    times = np.arange(DURATION + 1, dtype=float)
    own_v = np.array([f.ownship_speed, 0.0])
    psi = math.radians(f.relative_heading)
    v_rel = f.intruder_speed * np.array([math.cos(psi), math.sin(psi)]) - own_v
    normal = np.array([-v_rel[1], v_rel[0]]) / np.hypot(*v_rel) * rng.choice([-1.0, 1.0])
    offset = (times - CPA_TIME)[:, None]
    own_xy = offset * own_v
    intruder_xy = own_xy + f.hmd * normal + offset * v_rel
    rate = rng.normal(0.0, rate_sigma, times.size)
    own_z = np.concatenate([[0.0], np.cumsum(rate[:-1])])
    return Encounter(f, times, own_xy, intruder_xy, own_z, rate, float(own_z[CPA_TIME] - f.vmd))


def is_nmac(vertical_sep, horizontal_sep):
    hit = (np.asarray(vertical_sep) < NMAC_VERTICAL) & (np.asarray(horizontal_sep) < NMAC_HORIZONTAL)
    return bool(hit) if hit.ndim == 0 else hit


# -- perceivers ----------------------------------------------------------------


@dataclass(frozen=True)
class View:
    """What the ownship could see at one step; (dx, dy, dz) is intruder minus ownship."""

    tau: int
    h: float
    dx: float
    dy: float
    dz: float


class PerfectPerceiver:
    name = "perfect"

    def __call__(self, view, rng):
        return True, 1.0


class NeverDetect:
    name = "never"

    def __call__(self, view, rng):
        return False, 0.0


class StochasticPerceiver:
    """Detections drawn from the notional (|h|, tau) detection model."""

    name = "stochastic"

    def __init__(self, model=DetectionModel()):
        self.model = model

    def __call__(self, view, rng):
        p = float(self.model(abs(view.h), view.tau))
        return bool(rng.uniform() < p), p


class DetectorPerceiver:
    """Runs a trained detector on a rendered frame of the true geometry."""

    name = "detector"

    def __init__(self, detector):
        self.detector = detector

    def __call__(self, view, rng):
        horizontal = math.hypot(view.dx, view.dy)
        azimuth = math.atan2(view.dy, view.dx)
        elevation = math.atan2(view.dz, horizontal)
        image, _, _ = render_views(azimuth, elevation, math.hypot(horizontal, view.dz),
                                   self.detector.camera, rng)
        p_hat, _ = self.detector.predict(image)
        return bool(p_hat[0] > self.detector.threshold), float(p_hat[0])


# -- simulation ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimResult:
    t: np.ndarray
    tau: np.ndarray
    h: np.ndarray
    hdot: np.ndarray
    a_prev: np.ndarray
    own_z: np.ndarray
    intruder_z: float
    horizontal: np.ndarray
    detected: np.ndarray
    p_hat: np.ndarray
    advisory: np.ndarray
    risk: np.ndarray
    nmac: bool

    def logged_risks(self):
        return self.risk[np.isfinite(self.risk)]

    def to_frame(self):
        return pd.DataFrame({
            "t": self.t,
            "tau": self.tau,
            "h": self.h,
            "hdot": self.hdot,
            "own_z": self.own_z,
            "intruder_z": self.intruder_z,
            "horizontal_sep": self.horizontal,
            "detected": self.detected.astype(int),
            "p_hat": self.p_hat,
            "advisory": [Advisory(int(a)).name for a in self.advisory],
            "risk": self.risk,
        })


def simulate(encounter, policy, perceiver, table=None, seed=0, alpha=0.0, dynamics=DaaDynamics()):
    """One encounter at 1 Hz with perception in the loop.

    The ownship follows its nominal noisy vertical profile until the first
    alert, then the controller's rate commands. ``table`` is a marginal DAA risk
    table; when given, the risk of each step's realized perception error is
    logged up to the closest point of approach.
    """
    rng = np.random.default_rng(seed)
    n = encounter.times.size
    z = np.empty(n)
    rate = np.empty(n)
    z[0], rate[0] = encounter.own_z[0], encounter.own_rate[0]
    horizontal = encounter.horizontal_separation()
    rel_xy = encounter.intruder_xy - encounter.own_xy
    noise = np.asarray(dynamics.noise)

    tau = np.maximum(0, CPA_TIME - np.arange(n))
    detected = np.zeros(n, dtype=bool)
    p_hat = np.zeros(n)
    advisory = np.zeros(n, dtype=int)
    a_prev = np.zeros(n, dtype=int)
    risk = np.full(n, np.nan)
    alerted = False
    for t in range(n):
        h = z[t] - encounter.intruder_z
        view = View(int(tau[t]), h, rel_xy[t, 0], rel_xy[t, 1], -h)
        detected[t], p_hat[t] = perceiver(view, rng)
        if tau[t] > 0:
            advisory[t] = policy.advise(int(detected[t]), h, rate[t], a_prev[t], tau[t])
        if table is not None and t <= CPA_TIME:
            error = daa.DETECTED if detected[t] else daa.MISSED
            risk[t] = distdp.risk_batch(table, [[tau[t], h]], error, alpha)[0]
        if t == n - 1:
            break
        z[t + 1] = z[t] + rate[t] * dynamics.dt
        alerted |= advisory[t] != Advisory.COC
        if alerted:
            w = rng.choice(noise, p=dynamics.noise_probs)
            rate[t + 1] = daa.next_rate(rate[t], advisory[t], w, dynamics)
        else:
            rate[t + 1] = encounter.own_rate[t + 1]
        a_prev[t + 1] = advisory[t]

    h = z - encounter.intruder_z
    nmac = bool(np.any(is_nmac(np.abs(h), horizontal)))
    return SimResult(np.arange(n), tau, h, rate, a_prev, z, encounter.intruder_z, horizontal,
                     detected, p_hat, advisory, risk, nmac)


def _seed_root(seed):
    """A fresh ``SeedSequence`` so repeated calls with the same seed spawn the same children."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def sample_encounters(n, seed=0):
    """The encounters ``simulate_many(..., n, seed)`` flies, in the same order."""
    return [sample_encounter(s.spawn(2)[0]) for s in _seed_root(seed).spawn(n)]


def _run_chunk(seeds, policy, perceiver, table, alpha, dynamics):
    results = []
    for seed in seeds:
        encounter_seed, sim_seed = seed.spawn(2)
        results.append(simulate(sample_encounter(encounter_seed), policy, perceiver, table, sim_seed, alpha, dynamics))
    return results


def simulate_many(policy, perceiver, n, seed=0, table=None, alpha=0.0, dynamics=DaaDynamics(), jobs=1,
                  progress=False):
    """Simulate ``n`` encounters; the same ``seed`` gives the same encounters for every perceiver."""
    seeds = _seed_root(seed).spawn(n)
    if jobs > 1:
        chunks = [seeds[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, chunks, *([x] * jobs for x in (policy, perceiver, table, alpha, dynamics))))
        results = [None] * n
        for i, part in enumerate(parts):
            results[i::jobs] = part
        return results
    iterator = tqdm(seeds, desc=getattr(perceiver, "name", "encounters"), leave=False) if progress else seeds
    return [_run_chunk([s], policy, perceiver, table, alpha, dynamics)[0] for s in iterator]


def occupancy_weights(policy, n=1000, seed=0, dynamics=DaaDynamics(), jobs=1):
    """Visit frequencies of (hdot, a_prev) under perfect perception, linearly binned onto the policy grid.

    Every step up to the closest point of approach is pooled. Returns an array of
    shape (n_hdot, n_advisories) summing to 1.
    """
    results = simulate_many(policy, PerfectPerceiver(), n, seed, dynamics=dynamics, jobs=jobs)
    hdot = np.concatenate([r.hdot[:CPA_TIME + 1] for r in results])
    a_prev = np.concatenate([r.a_prev[:CPA_TIME + 1] for r in results])
    grid = Grid((policy.grid.axis("hdot"), policy.grid.axis("a_prev")), ("hdot", "a_prev"), (False, True))
    index, weight = grid.interpolants(np.column_stack([hdot, a_prev]))
    counts = np.bincount(index.ravel(), weights=weight.ravel(), minlength=grid.size)
    return (counts / counts.sum()).reshape(grid.shape)


def build_marginal_risk_table(policy, model=DetectionModel(), n_occupancy=1000, seed=0, dynamics=DaaDynamics(),
                              n_atoms=50, jobs=1):
    """Solve the DAA risk MDP and marginalize out (hdot, a_prev) with simulated occupancy."""
    weights = occupancy_weights(policy, n_occupancy, seed, dynamics, jobs)
    full = daa.solve_daa_risk(policy, model, dynamics, n_atoms, jobs)
    return daa.marginal_risk_table(full, weights), full


# -- reports -------------------------------------------------------------------


def risk_cdf(risks):
    values = np.sort(np.asarray(risks, dtype=float))
    return pd.DataFrame({"risk": values, "cdf": np.arange(1, values.size + 1) / max(values.size, 1)})


def top_decile_mean(risks):
    values = np.sort(np.asarray(risks, dtype=float))
    if values.size == 0:
        return float("nan")
    return float(values[int(math.floor(0.9 * values.size)):].mean())


@dataclass(frozen=True, eq=False)
class SuiteReport:
    nmac: pd.DataFrame
    summary: pd.DataFrame
    risks: pd.DataFrame

    def cdf(self, perceiver):
        return risk_cdf(self.risks.loc[self.risks["perceiver"] == perceiver, "risk"])


def evaluate_suite(policy, perceivers, n=1000, trials=3, seed=0, table=None, alpha=0.0, validation=None,
                   dynamics=DaaDynamics(), jobs=1, progress=False):
    """NMAC counts, logged-risk samples and detector precision/recall per perceiver.

    ``perceivers`` maps a name to one perceiver (reused for every trial) or a
    list with one perceiver per trial. Trial ``k`` uses the same encounters for
    every perceiver.
    """
    trial_seeds = _seed_root(seed).spawn(trials)
    nmac_rows, risk_frames, summary_rows = [], [], []
    for name, entry in perceivers.items():
        per_trial = entry if isinstance(entry, (list, tuple)) else [entry] * trials
        if len(per_trial) != trials:
            raise ValueError(f"perceiver {name!r} has {len(per_trial)} instances for {trials} trials")
        counts, precisions, recalls = [], [], []
        for k, (perceiver, trial_seed) in enumerate(zip(per_trial, trial_seeds)):
            results = simulate_many(policy, perceiver, n, trial_seed, table, alpha, dynamics, jobs, progress)
            count = sum(r.nmac for r in results)
            counts.append(count)
            nmac_rows.append({"perceiver": name, "trial": k, "nmac": count, "encounters": n})
            logged = np.concatenate([r.logged_risks() for r in results])
            risk_frames.append(pd.DataFrame({"perceiver": name, "trial": k, "risk": logged}))
            if validation is not None and isinstance(perceiver, DetectorPerceiver):
                p, r = precision_recall(perceiver.detector, validation)
                precisions.append(p)
                recalls.append(r)
            logger.info("%s trial %d: %d NMACs in %d encounters", name, k, count, n)
        counts = np.asarray(counts, dtype=float)
        summary_rows.append({
            "perceiver": name,
            "nmac_mean": counts.mean(),
            "nmac_se": counts.std(ddof=1) / math.sqrt(trials) if trials > 1 else 0.0,
            "precision": float(np.mean(precisions)) if precisions else np.nan,
            "recall": float(np.mean(recalls)) if recalls else np.nan,
            "top_decile_risk": top_decile_mean(pd.concat(risk_frames[-trials:])["risk"]),
        })
    return SuiteReport(pd.DataFrame(nmac_rows), pd.DataFrame(summary_rows), pd.concat(risk_frames, ignore_index=True))
