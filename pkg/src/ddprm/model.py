"""Deterministic pieces of the rating model.

Partial credit kernel, linear predictor, local neighborhoods of integer
component addresses, and the localized stick-breaking weights built on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp


class DDPRMError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(DDPRMError, ValueError):
    pass


class EmptyNeighborhoodError(DDPRMError, ValueError):
    """No positive integer address lies within the radius of the predictor."""


def _as_thresholds(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if tau.ndim != 1 or tau.size == 0:
        raise ValueError("thresholds must be a non-empty 1-d vector")
    return tau


def pcm_log_distribution(theta: float, tau) -> np.ndarray:
    """Log category probabilities of the partial credit model.

    ``tau`` holds the thresholds ``tau_1..tau_m``; ``tau_0`` is fixed at zero.
    """
    tau = _as_thresholds(tau)
    theta = float(theta)
    if not np.isfinite(theta) or not np.all(np.isfinite(tau)):
        raise ValueError("theta and tau must be finite")
    k = np.arange(tau.size + 1)
    eta = k * theta - np.concatenate(([0.0], np.cumsum(tau)))
    return eta - logsumexp(eta)


def pcm_distribution(theta: float, tau) -> np.ndarray:
    """Category probabilities ``P(Y=k | theta, tau)`` for ``k = 0..m``."""
    logp = pcm_log_distribution(theta, tau)
    p = np.exp(logp)
    return p / p.sum()


def pcm_mean_var(theta: float, tau) -> tuple[float, float]:
    p = pcm_distribution(theta, tau)
    k = np.arange(p.size)
    mean = float(k @ p)
    var = float(((k - mean) ** 2) @ p)
    return mean, max(var, 0.0)


def pcm_cumulative_eta(theta, tau) -> np.ndarray:
    """Unnormalized log-kernels ``k*theta - sum_{l<=k} tau_l``, row-wise.

    ``theta`` has shape (n,), ``tau`` shape (n, m). Thresholds equal to
    ``+inf`` switch off the categories above an item's own maximum.
    """
    theta = np.asarray(theta, dtype=float)
    tau = np.asarray(tau, dtype=float)
    n, m = tau.shape
    cum = np.zeros((n, m + 1))
    np.cumsum(tau, axis=1, out=cum[:, 1:])
    return np.arange(m + 1) * theta[:, None] - cum


def pcm_logpmf(y, theta, tau) -> np.ndarray:
    """Vectorized ``log f(y_i | theta_i, tau_i)`` over observations."""
    eta = pcm_cumulative_eta(theta, tau)
    y = np.asarray(y, dtype=np.intp)
    return eta[np.arange(y.size), y] - logsumexp(eta, axis=1)


def pcm_moments(theta, tau) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise PCM mean and variance; the vectorized ``pcm_mean_var``."""
    eta = pcm_cumulative_eta(theta, tau)
    p = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
    k = np.arange(eta.shape[1])
    mean = p @ k
    var = p @ (k**2) - mean**2
    return mean, np.maximum(var, 0.0)


def linear_predictor(x, gamma) -> float:
    x = np.asarray(x, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if x.shape != gamma.shape:
        raise ValueError(f"covariate length {x.shape} does not match gamma {gamma.shape}")
    return float(x @ gamma)


@dataclass(frozen=True)
class LocalSubset:
    """Ordered component addresses within a neighborhood of a predictor."""

    indices: tuple[int, ...]

    def __post_init__(self):
        if not self.indices:
            raise EmptyNeighborhoodError("local subset is empty")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("local subset indices must be strictly increasing")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, h):
        return self.indices[0] <= h <= self.indices[-1] and h in self.indices

    @property
    def first(self) -> int:
        return self.indices[0]

    @property
    def last(self) -> int:
        return self.indices[-1]


def neighborhood_bounds(v, psi):
    """Smallest and largest integer address ``h >= 1`` with ``|v - h| <= psi``.

    Works elementwise on arrays. Empty neighborhoods come back with
    ``lo > hi``; callers decide whether that is an error.
    """
    v = np.asarray(v, dtype=float)
    psi = np.asarray(psi, dtype=float)
    lo = np.maximum(np.ceil(v - psi), 1.0).astype(np.int64)
    hi = np.floor(v + psi).astype(np.int64)
    return lo, hi


def local_subset(v: float, psi: float) -> LocalSubset:
    if not np.isfinite(v):
        raise ValueError("linear predictor must be finite")
    if psi < 0.5:
        raise ConfigurationError(f"neighborhood radius {psi} is below 0.5")
    lo, hi = neighborhood_bounds(v, psi)
    if lo > hi:
        raise EmptyNeighborhoodError(
            f"no positive address within {psi} of linear predictor {v}"
        )
    return LocalSubset(tuple(range(int(lo), int(hi) + 1)))


@dataclass(frozen=True)
class MixtureDistribution:
    """Weights over the atoms of one covariate pattern's mixing distribution."""

    weights: np.ndarray
    atom_refs: tuple[int, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.atom_refs):
            raise ValueError("weights and atom references differ in length")


def local_stick_weights(upsilon, force_last: bool = True) -> np.ndarray:
    """Stick-breaking weights for an ordered run of sticks.

    With ``force_last`` the final stick is treated as 1 so the weights sum
    to one; the stored stick values are not touched.
    """
    v = np.array(upsilon, dtype=float)
    if force_last and v.size:
        v[-1] = 1.0
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - v[:-1])))
    return v * remaining


def log_local_stick_weights(upsilon, force_last: bool = True) -> np.ndarray:
    v = np.array(upsilon, dtype=float)
    with np.errstate(divide="ignore"):
        log_v = np.log(v)
        log_rest = np.log1p(-v)
    if force_last and v.size:
        log_v[-1] = 0.0
    tail = np.concatenate(([0.0], np.cumsum(log_rest[:-1])))
    return log_v + tail


def stick_weights(subset: LocalSubset, sticks) -> MixtureDistribution:
    """Localized stick-breaking weights over ``subset``.

    ``sticks`` maps address -> stick value (a dict, or any sequence indexed
    by address).
    """
    try:
        v = [sticks[h] for h in subset]
    except (KeyError, IndexError) as exc:
        raise ValueError(f"no stick value for address {exc}") from None
    return MixtureDistribution(local_stick_weights(v), tuple(subset))


@dataclass
class StickBreakState:
    """Atoms, sticks, regression coefficients and radii of the local DP.

    ``atoms`` and ``sticks`` are keyed by component address. ``psi`` maps a
    covariate pattern (as a tuple) to its neighborhood radius.
    """

    atoms: dict[int, np.ndarray]
    sticks: dict[int, float]
    gamma: np.ndarray
    psi: dict[tuple, float] = field(default_factory=dict)

    def radius(self, x) -> float:
        key = tuple(float(v) for v in np.asarray(x, dtype=float))
        try:
            return self.psi[key]
        except KeyError:
            raise KeyError(f"no neighborhood radius for covariate pattern {key}") from None

    def mixture(self, x) -> MixtureDistribution:
        v = linear_predictor(x, self.gamma)
        return stick_weights(local_subset(v, self.radius(x)), self.sticks)


def mixture_rating_probability(y: int, theta: float, x, state: StickBreakState) -> float:
    """``sum_l w_l(x) P(Y=y | theta, tau_{pi_l})`` over the local subset of ``x``."""
    mix = state.mixture(x)
    total = 0.0
    for w, h in zip(mix.weights, mix.atom_refs):
        tau = state.atoms[h]
        if not 0 <= y <= len(tau):
            raise ValueError(f"rating {y} outside 0..{len(tau)}")
        total += w * pcm_distribution(theta, tau)[y]
    return float(total)


def mixture_pmf(theta: float, weights: Sequence[float], atoms) -> np.ndarray:
    """Full pmf of a finite PCM mixture; ``atoms`` has one row per weight."""
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    probs = np.array([pcm_distribution(theta, a) for a in atoms])
    return np.asarray(weights, dtype=float) @ probs

