"""Categorical cost distributions and the risk measures built on them.

Every risk number in the project comes out of this module: a distribution is a
fixed, strictly increasing support of scalar costs plus aligned probabilities.
The scalar functions (``mean``, ``var``, ``cvar``, ``worst_case``) take a single
``CategoricalDistribution``; the ``*_array`` variants work on stacks of
probability vectors that share one support, which is how the solver and the
risk tables call them.

CVaR uses the superquantile form: the expected value of the worst ``1 - alpha``
probability mass, splitting the atom that straddles the quantile. For discrete
costs the hard conditional ``E[X | X >= VaR]`` jumps as alpha moves across an
atom; the split form is continuous and still gives ``cvar(d, 0) == mean(d)``.
"""
from dataclasses import dataclass

import numpy as np

from utils.errors import DistributionError

SUM_TOLERANCE = 1e-9
RENORMALIZE_LIMIT = 1e-6


def check_alpha(alpha):
    alpha = float(alpha)
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"risk level alpha must be in [0, 1), got {alpha}")
    return alpha


def _frozen(values):
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CategoricalDistribution:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=float).ravel()
        probs = np.asarray(self.probs, dtype=float).ravel()
        if support.size == 0 or support.shape != probs.shape:
            raise DistributionError(
                f"support and probs must be non-empty and aligned, got {support.size} and {probs.size}"
            )
        if np.any(np.diff(support) <= 0):
            raise DistributionError("support must be strictly increasing")
        if np.any(probs < 0):
            raise DistributionError("probabilities must be non-negative")
        total = probs.sum()
        if abs(total - 1.0) > RENORMALIZE_LIMIT:
            raise DistributionError(f"probabilities sum to {total:.9f}, expected 1")
        if abs(total - 1.0) > 0:
            probs = probs / total
        object.__setattr__(self, "support", _frozen(support))
        object.__setattr__(self, "probs", _frozen(probs))

    @classmethod
    def point_mass(cls, value):
        return cls([value], [1.0])

    @classmethod
    def mixture(cls, dists, weights):
        """Weighted mixture of distributions that share one support."""
        dists = list(dists)
        weights = np.asarray(weights, dtype=float)
        if not dists or len(dists) != weights.size:
            raise DistributionError("mixture needs one weight per distribution")
        support = dists[0].support
        for d in dists[1:]:
            if d.support.shape != support.shape or np.any(d.support != support):
                raise DistributionError("mixture components must share a support")
        probs = np.tensordot(weights, np.stack([d.probs for d in dists]), axes=1)
        return cls(support, probs)

    def __len__(self):
        return self.support.size

    def __eq__(self, other):
        if not isinstance(other, CategoricalDistribution):
            return NotImplemented
        return (
            self.support.shape == other.support.shape
            and np.array_equal(self.support, other.support)
            and np.array_equal(self.probs, other.probs)
        )

    __hash__ = None


# -- array forms -----------------------------------------------------------


def mean_array(support, probs):
    return np.asarray(probs, dtype=float) @ np.asarray(support, dtype=float)


def cvar_array(support, probs, alpha):
    """CVaR of every distribution in ``probs`` (last axis = atoms)."""
    alpha = check_alpha(alpha)
    support = np.asarray(support, dtype=float)
    probs = np.asarray(probs, dtype=float)
    beta = 1.0 - alpha
    # mass strictly above atom j
    above = np.cumsum(probs[..., ::-1], axis=-1)[..., ::-1] - probs
    taken = np.clip(beta - above, 0.0, probs)
    return taken @ support / beta


def var_array(support, probs, alpha):
    alpha = check_alpha(alpha)
    support = np.asarray(support, dtype=float)
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs, axis=-1)
    hit = (cdf >= alpha - 1e-12) & (probs > 0)
    return support[np.argmax(hit, axis=-1)]


def worst_case_array(support, probs):
    support = np.asarray(support, dtype=float)
    positive = np.asarray(probs) > 0
    last = positive.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    return support[last]


def project_array(support, values, weights):
    """Split weighted values onto the two nearest atoms of ``support``.

    ``values`` and ``weights`` have shape (n, k); the result has shape
    (n, len(support)). Values outside the support are clamped to the end atoms.
    """
    support = np.asarray(support, dtype=float)
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.ndim == 1:
        values, weights = values[None, :], weights[None, :]
    n, n_atoms = values.shape[0], support.size
    if n_atoms == 1:
        return weights.sum(axis=1, keepdims=True)

    v = np.clip(values, support[0], support[-1])
    lo = np.clip(np.searchsorted(support, v, side="right") - 1, 0, n_atoms - 2)
    frac = (v - support[lo]) / (support[lo + 1] - support[lo])
    rows = np.arange(n)[:, None] * n_atoms
    flat = np.concatenate([(rows + lo).ravel(), (rows + lo + 1).ravel()])
    mass = np.concatenate([(weights * (1.0 - frac)).ravel(), (weights * frac).ravel()])
    out = np.bincount(flat, weights=mass, minlength=n * n_atoms)
    return out.reshape(n, n_atoms)


def total_variation(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


# -- scalar forms ----------------------------------------------------------


def mean(d):
    return float(mean_array(d.support, d.probs))


def var(d, alpha):
    """Smallest atom carrying mass whose CDF reaches alpha."""
    return float(var_array(d.support, d.probs, alpha))


def cvar(d, alpha):
    return float(cvar_array(d.support, d.probs, alpha))


def worst_case(d):
    return float(worst_case_array(d.support, d.probs))


def project(target_support, samples):
    samples = list(samples)
    if not samples:
        raise DistributionError("cannot project an empty sample list")
    values, weights = (np.asarray(col, dtype=float) for col in zip(*samples))
    if np.any(weights < 0):
        raise DistributionError("sample weights must be non-negative")
    if abs(weights.sum() - 1.0) > RENORMALIZE_LIMIT:
        raise DistributionError(f"sample weights sum to {weights.sum():.9f}, expected 1")
    probs = project_array(target_support, values, weights)[0]
    return CategoricalDistribution(target_support, probs)
