"""Slice-augmented MCMC for the localized stick-breaking PCM mixture.

One sweep performs, in order: slice variables, allocations, abilities,
ability variance, regression coefficients, neighborhood radii, thresholds,
sticks and the concentration parameter. Sticks and atoms live in arrays
indexed by component address (slot 0 unused) and are materialized from their
priors the first time an address is needed.

Three mixture modes share the machinery:

``"local"``   covariate-dependent neighborhoods (the full model)
``"global"``  one unbounded stick-breaking sequence shared by all mixed items
``"none"``    every item has its own fixed thresholds (no mixture)
"""

from __future__ import annotations

import json
import logging
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .adaptive import AdaptiveProposal, metropolis_accept
from .archive import PosteriorArchive
from .data import RatingDataset
from .model import (ConfigurationError, DDPRMError, EmptyNeighborhoodError,
                    StickBreakState, neighborhood_bounds, pcm_cumulative_eta)
from .priors import HyperParams

logger = logging.getLogger("ddprm.mcmc")

MIXTURES = ("local", "global", "none")
ALLOCATION_TARGETS = ("local", "prefix")

_STICK_LO = np.finfo(float).tiny
_STICK_HI = np.nextafter(1.0, 0.0)
# Remaining stick mass below which the unbounded sequence is truncated when
# a realized mixing distribution is recorded.
_GLOBAL_TAIL = 1e-10
_GLOBAL_MAX_ADDRESS = 100_000


class SamplerError(DDPRMError, RuntimeError):
    """Internal inconsistency or non-finite target at the current state."""


@dataclass(frozen=True)
class ChainConfig:
    iterations: int
    burn_in: int
    thin: int = 1
    seed: int = 0
    chain_id: int = 0
    allocation_target: str = "local"
    progress_every: int = 0
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None
    init_scales: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigurationError("burn-in must be smaller than the number of iterations")
        if self.thin < 1:
            raise ConfigurationError("thinning interval must be at least 1")
        if self.allocation_target not in ALLOCATION_TARGETS:
            raise ConfigurationError(f"allocation_target must be one of {ALLOCATION_TARGETS}")
        if self.checkpoint_every and not self.checkpoint_path:
            raise ConfigurationError("checkpoint_every needs a checkpoint_path")

    @property
    def n_saved(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def is_saved(self, iteration: int) -> bool:
        """``iteration`` is 1-based."""
        k = iteration - self.burn_in
        return k > 0 and k % self.thin == 0


def make_rng(seed: int, chain_id: int = 0) -> np.random.Generator:
    """Independent stream per (seed, chain id)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chain_id),)))


class ModelLayout:
    """Index bookkeeping derived from the data, priors and mixture mode."""

    def __init__(self, data: RatingDataset, hyper: HyperParams, mixture: str = "local"):
        if mixture not in MIXTURES:
            raise ConfigurationError(f"mixture must be one of {MIXTURES}")
        self.data = data
        self.mixture = mixture
        J = data.J
        if mixture == "none":
            mixed = np.zeros(J, dtype=bool)
        elif hyper.mixed_items is None:
            mixed = np.ones(J, dtype=bool)
        else:
            mixed = np.zeros(J, dtype=bool)
            for j in hyper.mixed_items:
                if not 1 <= j <= J:
                    raise ConfigurationError(f"mixed item {j} outside 1..{J}")
                mixed[j - 1] = True
        self.item_mixed = mixed
        self.mixed_obs = np.flatnonzero(mixed[data.item])
        self.fixed_obs = np.flatnonzero(~mixed[data.item])
        self.fixed_items = np.flatnonzero(~mixed)
        ms = np.unique(data.item_max[mixed])
        if ms.size > 1:
            raise ConfigurationError(
                f"mixed items must share one number of categories, found maxima {ms.tolist()}")
        self.m = int(ms[0]) if ms.size else 0
        self.m_max = int(data.item_max.max())
        self.n_mix = self.mixed_obs.size

        if mixture == "local" and self.n_mix:
            x = data.covariate_matrix()[self.mixed_obs]
            uniq, first, inverse = np.unique(x, axis=0, return_index=True, return_inverse=True)
            order = np.argsort(first, kind="stable")
            rank = np.empty_like(order)
            rank[order] = np.arange(order.size)
            self.patterns = uniq[order]
            self.obs_pattern = rank[inverse.ravel()]
            self.p = data.p
        else:
            self.patterns = np.zeros((1 if self.n_mix else 0, 0))
            self.obs_pattern = np.zeros(self.n_mix, dtype=np.intp)
            self.p = 0
        self.G = self.patterns.shape[0]

        self.ex_mix = data.examinee[self.mixed_obs]
        self.y_mix = data.rating[self.mixed_obs]
        self.ex_fix = data.examinee[self.fixed_obs]
        self.y_fix = data.rating[self.fixed_obs]
        self.item_fix = data.item[self.fixed_obs]
        # items that carry a threshold coordinate l (l < m_j)
        self.fixed_coord_items = [self.fixed_items[data.item_max[self.fixed_items] > l]
                                  for l in range(self.m_max)]

    @property
    def local(self) -> bool:
        return self.mixture == "local"


@dataclass
class LatentState:
    """Slice variables (stored on the log scale) and allocations."""

    z: np.ndarray
    log_u: np.ndarray

    @property
    def u(self) -> np.ndarray:
        return np.exp(self.log_u)


@dataclass
class ChainState:
    theta: np.ndarray
    sigma2: float
    alpha: float
    gamma: np.ndarray
    psi: np.ndarray
    atoms: np.ndarray   # (capacity + 1, m); row h is the atom at address h
    sticks: np.ndarray  # (capacity + 1,); entry 0 unused
    fixed_tau: np.ndarray  # (J, m_max); NaN rows for mixed items, +inf padding
    latents: LatentState

    @property
    def capacity(self) -> int:
        return self.sticks.size - 1

    def copy(self) -> "ChainState":
        return ChainState(self.theta.copy(), self.sigma2, self.alpha, self.gamma.copy(),
                          self.psi.copy(), self.atoms.copy(), self.sticks.copy(),
                          self.fixed_tau.copy(),
                          LatentState(self.latents.z.copy(), self.latents.log_u.copy()))

    def stick_break(self, patterns: np.ndarray) -> StickBreakState:
        """Dictionary view used by the scalar model functions."""
        atoms = {h: self.atoms[h].copy() for h in range(1, self.capacity + 1)}
        sticks = {h: float(self.sticks[h]) for h in range(1, self.capacity + 1)}
        psi = {tuple(float(v) for v in x): float(r) for x, r in zip(patterns, self.psi)}
        return StickBreakState(atoms, sticks, self.gamma.copy(), psi)


def slice_bounds(log_u) -> np.ndarray:
    """Largest address ``h`` with ``u < exp(-h)`` for each slice variable.

    Strict inequality: when ``-log u`` is an integer ``k`` the bound is ``k - 1``.
    """
    return (np.ceil(-np.asarray(log_u, dtype=float)) - 1).astype(np.int64)


def compute_n_max(u) -> int:
    """Largest address any observation can be allocated to under slice values ``u``."""
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("slice variables must lie in (0, 1)")
    return int(slice_bounds(np.log(u)).max())


def _lse(a, axis=-1):
    mx = np.max(a, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(mx, axis) + np.log(np.sum(np.exp(a - mx), axis=axis))


def _pcm_loglik(y, theta, tau):
    eta = pcm_cumulative_eta(theta, tau)
    return eta[np.arange(y.size), y] - _lse(eta, axis=1)


def _log_sticks(sticks):
    with np.errstate(divide="ignore"):
        log_v = np.log(sticks)
    # slot 0 holds 0, so cum[h] sums log(1 - v_r) over r = 1..h
    return log_v, np.cumsum(np.log1p(-sticks))


class SliceSampler:
    """Holds one chain's state, proposals and random stream."""

    def __init__(self, data: RatingDataset, hyper: HyperParams, config: ChainConfig,
                 mixture: str = "local", state: Optional[ChainState] = None,
                 rng: Optional[np.random.Generator] = None):
        self.layout = ModelLayout(data, hyper, mixture)
        self.hyper = hyper
        self.config = config
        self.rng = make_rng(config.seed, config.chain_id) if rng is None else rng
        L = self.layout
        if L.m:
            self.tau_cov = hyper.atom_covariance(L.m)
            self.tau_chol = np.linalg.cholesky(self.tau_cov)
            self.tau_prec = np.linalg.inv(self.tau_cov)
        if L.local and hyper.a_gamma <= 0:
            raise ConfigurationError("gamma lower bound must be positive")
        self.state = self.initial_state() if state is None else state
        scales = {"theta": 1.0, "tau": 0.3, "fixed_tau": 0.3, "gamma": 2.0, "psi": 0.5}
        scales.update(config.init_scales)
        st = self.state
        self.proposals = {
            "theta": AdaptiveProposal(st.theta.shape, scales["theta"]),
            "tau": AdaptiveProposal((st.capacity + 1, L.m), scales["tau"]),
            "fixed_tau": AdaptiveProposal((data.J, L.m_max), scales["fixed_tau"]),
            "gamma": AdaptiveProposal(st.gamma.shape, scales["gamma"]),
            "psi": AdaptiveProposal(st.psi.shape, scales["psi"]),
        }
        self.acceptance = {k: [0, 0] for k in self.proposals}
        self.iteration = 0
        self._adapting = True

    # ------------------------------------------------------------------ setup
    def initial_state(self) -> ChainState:
        L, hyper, rng = self.layout, self.hyper, self.rng
        data = L.data
        sigma2 = hyper.fixed_sigma2 if hyper.sigma2_fixed else 1.0
        alpha = hyper.fixed_alpha if hyper.alpha_fixed else 1.0
        if L.local:
            gamma = rng.uniform(hyper.a_gamma, hyper.b_gamma, size=L.p)
            psi_fixed = hyper.psi_value
            psi = (np.full(L.G, psi_fixed) if psi_fixed is not None
                   else rng.uniform(hyper.a_psi, hyper.b_psi, size=L.G))
        else:
            gamma = np.zeros(0)
            psi = np.zeros(0)
        fixed_tau = np.full((data.J, L.m_max), np.nan)
        for j in L.fixed_items:
            fixed_tau[j] = np.inf
            fixed_tau[j, :data.item_max[j]] = 0.0
        st = ChainState(
            theta=np.zeros(data.N), sigma2=float(sigma2), alpha=float(alpha),
            gamma=gamma, psi=psi, atoms=np.zeros((1, L.m)), sticks=np.zeros(1),
            fixed_tau=fixed_tau,
            latents=LatentState(np.zeros(L.n_mix, dtype=np.int64), np.zeros(L.n_mix)))
        self.state = st
        if not L.n_mix:
            return st
        lo, hi = self.pattern_bounds(st)
        if L.local:
            self._ensure_capacity(int(hi.max()))
        else:
            hi = np.full(L.G, self._extend_global_tail())
        # allocate from the prior-weighted likelihood at theta = 0
        g = L.obs_pattern
        z = self._draw_allocations(lo[g], hi[g], hi[g], st.theta[L.ex_mix],
                                   use_slice_weight=False)
        st.latents.z = z
        st.latents.log_u = -z - 0.5
        return st

    def _draw_prior_atoms(self, k):
        return self.rng.standard_normal((k, self.layout.m)) @ self.tau_chol.T

    def _ensure_capacity(self, address: int) -> None:
        st = self.state
        extra = int(address) - st.capacity
        if extra <= 0:
            return
        if address > _GLOBAL_MAX_ADDRESS:
            raise SamplerError(f"component address {address} exceeds the supported maximum")
        new_sticks = np.clip(self.rng.beta(1.0, st.alpha, size=extra), _STICK_LO, _STICK_HI)
        if st.capacity == 0:
            new_sticks = np.concatenate(([0.0], new_sticks))
            new_atoms = np.concatenate([np.zeros((1, self.layout.m)),
                                        self._draw_prior_atoms(extra)])
            st.sticks, st.atoms = new_sticks, new_atoms
        else:
            st.sticks = np.concatenate([st.sticks, new_sticks])
            st.atoms = np.concatenate([st.atoms, self._draw_prior_atoms(extra)])
        if hasattr(self, "proposals"):
            self.proposals["tau"].grow(st.capacity + 1)

    def _extend_global_tail(self) -> int:
        """Grow the unbounded sequence until the leftover stick mass is negligible."""
        st = self.state
        if st.capacity == 0:
            self._ensure_capacity(8)
        while True:
            tail = np.exp(np.log1p(-st.sticks[1:]).sum())
            if tail < _GLOBAL_TAIL:
                return st.capacity
            self._ensure_capacity(st.capacity + 8)

    # -------------------------------------------------------------- geometry
    def pattern_bounds(self, state: Optional[ChainState] = None):
        """Per-pattern lowest and highest address of the local subset."""
        st = self.state if state is None else state
        L = self.layout
        if not L.local:
            big = np.iinfo(np.int64).max // 4
            return np.ones(L.G, dtype=np.int64), np.full(L.G, big, dtype=np.int64)
        v = L.patterns @ st.gamma
        lo, hi = neighborhood_bounds(v, st.psi)
        if np.any(lo > hi):
            g = int(np.flatnonzero(lo > hi)[0])
            raise EmptyNeighborhoodError(
                f"pattern {g}: no address within {st.psi[g]} of linear predictor {v[g]}")
        return lo, hi

    def _log_weight(self, h, lo, hi, log_v, cum, force_last=True):
        """Log local stick-breaking weight of address ``h`` in ``[lo, hi]``."""
        lv = log_v[h]
        if force_last:
            lv = np.where(h == hi, 0.0, lv)
        return lv + cum[h - 1] - cum[lo - 1]

    def _allocation_log_weights(self, h, lo, hi, log_v, cum):
        """Allocation factor of the gamma/psi targets, with membership check."""
        inside = (h >= lo) & (h <= hi)
        if self.config.allocation_target == "prefix":
            w = log_v[h] + cum[h - 1]
        else:
            # a proposed subset may start beyond the materialized sticks
            lo = np.minimum(lo, h)
            w = self._log_weight(h, lo, hi, log_v, cum, force_last=self.layout.local)
        return np.where(inside, w, -np.inf)

    # ------------------------------------------------------------ likelihood
    def obs_thresholds(self, state: Optional[ChainState] = None) -> np.ndarray:
        st = self.state if state is None else state
        L = self.layout
        tau = st.fixed_tau[L.data.item].copy()
        if L.n_mix:
            tau[L.mixed_obs, :L.m] = st.atoms[st.latents.z]
            tau[L.mixed_obs, L.m:] = np.inf
        return tau

    def data_loglik(self, state: Optional[ChainState] = None) -> float:
        """``sum_i log f(y_i | theta_t(i), tau_i)`` given the current allocations."""
        st = self.state if state is None else state
        data = self.layout.data
        return float(_pcm_loglik(data.rating, st.theta[data.examinee],
                                 self.obs_thresholds(st)).sum())

    def joint_augmented_loglik(self, state: Optional[ChainState] = None,
                               per_observation: bool = False):
        """Log of the slice-augmented likelihood.

        Each mixed observation contributes
        ``log I(0 < u < exp(-z)) + z + log f(y | theta, tau_z) + log w_z(x)``;
        fixed-threshold observations contribute ``log f``.
        """
        st = self.state if state is None else state
        L = self.layout
        data = L.data
        out = _pcm_loglik(data.rating, st.theta[data.examinee], self.obs_thresholds(st))
        if L.n_mix:
            z, log_u = st.latents.z, st.latents.log_u
            lo, hi = self.pattern_bounds(st)
            g = L.obs_pattern
            log_v, cum = _log_sticks(st.sticks)
            inside = (z >= lo[g]) & (z <= hi[g])
            zc = np.where(inside, z, lo[g])
            logw = self._log_weight(zc, lo[g], hi[g], log_v, cum, force_last=L.local)
            ok = inside & (log_u < -z) & np.isfinite(log_u)
            out[L.mixed_obs] += np.where(ok, z + logw, -np.inf)
        return out if per_observation else float(out.sum())

    def mixture_loglik(self, state: Optional[ChainState] = None,
                       per_observation: bool = False):
        """Log-likelihood with allocations summed out over each local subset."""
        st = self.state if state is None else state
        L = self.layout
        data = L.data
        out = _pcm_loglik(data.rating, st.theta[data.examinee], self.obs_thresholds(st))
        if L.n_mix:
            lo, hi = self.pattern_bounds(st)
            if not L.local:
                hi = np.full(L.G, st.capacity)
            log_v, cum = _log_sticks(st.sticks)
            g = L.obs_pattern
            terms = []
            for k in range(int((hi - lo).max()) + 1):
                h = lo[g] + k
                valid = h <= hi[g]
                hc = np.where(valid, h, lo[g])
                eta = pcm_cumulative_eta(st.theta[L.ex_mix], st.atoms[hc])
                lf = eta[np.arange(L.n_mix), L.y_mix] - _lse(eta, axis=1)
                lw = self._log_weight(hc, lo[g], hi[g], log_v, cum, force_last=L.local)
                terms.append(np.where(valid, lf + lw, -np.inf))
            out[L.mixed_obs] = _lse(np.stack(terms, axis=1), axis=1)
        return out if per_observation else float(out.sum())

    # ----------------------------------------------------------------- steps
    def sample_slice_u(self) -> None:
        """Step 1: ``u_i ~ un(0, exp(-z_i))``, kept as ``log u_i``."""
        lat = self.state.latents
        if not lat.z.size:
            return
        w = self.rng.uniform(np.finfo(float).tiny, 1.0, size=lat.z.size)
        lat.log_u = -lat.z + np.log(w)

    def _draw_allocations(self, lo, upper, hi, theta, use_slice_weight=True):
        L, st = self.layout, self.state
        if np.any(upper < lo):
            raise SamplerError("an observation has no admissible allocation")
        width = int((upper - lo).max()) + 1
        cand = lo[:, None] + np.arange(width)
        valid = cand <= upper[:, None]
        cand = np.where(valid, cand, lo[:, None])
        m = L.m
        cum = np.zeros((st.capacity + 1, m + 1))
        np.cumsum(st.atoms, axis=1, out=cum[:, 1:])
        eta = np.arange(m + 1) * theta[:, None, None] - cum[cand]
        lf = np.take_along_axis(eta, L.y_mix[:, None, None], axis=2)[..., 0] - _lse(eta, axis=2)
        log_v, lcum = _log_sticks(st.sticks)
        logw = lf + self._log_weight(cand, lo[:, None], hi[:, None], log_v, lcum,
                                     force_last=L.local)
        if use_slice_weight:
            logw = logw + cand
        logw = np.where(valid, logw, -np.inf)
        mx = logw.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(mx)):
            raise SamplerError("allocation weights vanish for some observation")
        c = np.cumsum(np.exp(logw - mx), axis=1)
        r = self.rng.random(lo.size) * c[:, -1]
        idx = (c <= r[:, None]).sum(axis=1)
        return cand[np.arange(lo.size), idx].astype(np.int64)

    def sample_allocation_z(self) -> None:
        """Step 2: ``P(z_i = h) ∝ I(u_i < exp(-h)) exp(h) f(y_i | theta, tau_h) w_h(x_i)``."""
        L, st = self.layout, self.state
        if not L.n_mix:
            return
        lo, hi = self.pattern_bounds()
        g = L.obs_pattern
        bound = slice_bounds(st.latents.log_u)
        upper = np.minimum(hi[g], bound)
        self._ensure_capacity(int(upper.max()))
        st.latents.z = self._draw_allocations(lo[g], upper, hi[g], st.theta[L.ex_mix])

    def sample_theta(self) -> np.ndarray:
        """Step 3: per-examinee random-walk MH, all examinees in parallel."""
        st, data = self.state, self.layout.data
        prop = self.proposals["theta"]
        tau = self.obs_thresholds()
        cur = st.theta
        new = cur + prop.scale * self.rng.standard_normal(cur.size)
        ll_cur = np.bincount(data.examinee, _pcm_loglik(data.rating, cur[data.examinee], tau),
                             minlength=cur.size)
        ll_new = np.bincount(data.examinee, _pcm_loglik(data.rating, new[data.examinee], tau),
                             minlength=cur.size)
        if not np.all(np.isfinite(ll_cur)):
            raise SamplerError("non-finite ability log-target at the current state")
        log_ratio = ll_new - ll_cur - 0.5 * (new**2 - cur**2) / st.sigma2
        acc = metropolis_accept(self.rng, log_ratio)
        st.theta = np.where(acc, new, cur)
        self._record("theta", acc)
        return acc

    def sample_sigma2(self) -> None:
        """Step 4: conjugate inverse-gamma draw."""
        st, hyper = self.state, self.hyper
        if hyper.sigma2_fixed:
            return
        shape, rate = self.sigma2_posterior(st.theta)
        st.sigma2 = float(1.0 / self.rng.gamma(shape, 1.0 / rate))

    def sigma2_posterior(self, theta) -> tuple[float, float]:
        theta = np.asarray(theta, dtype=float)
        return (self.hyper.a_sigma2 + theta.size / 2.0,
                self.hyper.b_sigma2 + 0.5 * float(theta @ theta))

    def _allocation_pairs(self):
        """Distinct (pattern, address) pairs among allocations with their counts."""
        L, st = self.layout, self.state
        key = L.obs_pattern.astype(np.int64) * (st.capacity + 1) + st.latents.z
        uniq, counts = np.unique(key, return_counts=True)
        return uniq // (st.capacity + 1), uniq % (st.capacity + 1), counts

    def sample_gamma(self) -> np.ndarray:
        """Step 5: coordinate-wise random-walk MH on the regression coefficients."""
        L, st, hyper = self.layout, self.state, self.hyper
        if not (L.local and L.n_mix):
            return np.zeros(0, dtype=bool)
        prop = self.proposals["gamma"]
        pg, ph, pc = self._allocation_pairs()
        log_v, cum = _log_sticks(st.sticks)
        v = L.patterns @ st.gamma
        accepted = np.zeros(L.p, dtype=bool)
        steps = prop.scale * self.rng.standard_normal(L.p)
        for j in range(L.p):
            new_gj = st.gamma[j] + steps[j]
            affected = L.patterns[:, j] != 0
            if not hyper.a_gamma <= new_gj <= hyper.b_gamma:
                continue
            v_new = v + L.patterns[:, j] * (new_gj - st.gamma[j])
            lo, hi = neighborhood_bounds(v, st.psi)
            lo_n, hi_n = neighborhood_bounds(v_new, st.psi)
            sel = affected[pg]
            if np.any(lo_n[affected] > hi_n[affected]):
                continue
            g, h, c = pg[sel], ph[sel], pc[sel]
            old = self._allocation_log_weights(h, lo[g], hi[g], log_v, cum)
            new = self._allocation_log_weights(h, lo_n[g], hi_n[g], log_v, cum)
            if not np.all(np.isfinite(old)):
                raise SamplerError("current allocation lies outside its neighborhood")
            with np.errstate(invalid="ignore"):
                log_ratio = float(c @ (new - old)) if c.size else 0.0
            if metropolis_accept(self.rng, log_ratio):
                st.gamma[j] = new_gj
                v = v_new
                accepted[j] = True
        self._record("gamma", accepted)
        return accepted

    def sample_psi(self) -> np.ndarray:
        """Step 6: random-walk MH on each pattern's radius, patterns in parallel."""
        L, st, hyper = self.layout, self.state, self.hyper
        if not (L.local and L.n_mix) or hyper.psi_value is not None:
            return np.zeros(0, dtype=bool)
        prop = self.proposals["psi"]
        new_psi = st.psi + prop.scale * self.rng.standard_normal(L.G)
        in_support = (new_psi >= hyper.a_psi) & (new_psi <= hyper.b_psi)
        pg, ph, pc = self._allocation_pairs()
        log_v, cum = _log_sticks(st.sticks)
        v = L.patterns @ st.gamma
        lo, hi = neighborhood_bounds(v, st.psi)
        lo_n, hi_n = neighborhood_bounds(v, np.where(in_support, new_psi, st.psi))
        old = self._allocation_log_weights(ph, lo[pg], hi[pg], log_v, cum)
        new = self._allocation_log_weights(ph, lo_n[pg], hi_n[pg], log_v, cum)
        if not np.all(np.isfinite(old)):
            raise SamplerError("current allocation lies outside its neighborhood")
        with np.errstate(invalid="ignore"):
            log_ratio = np.bincount(pg, pc * (new - old), minlength=L.G)
        log_ratio = np.where(in_support & (lo_n <= hi_n), log_ratio, -np.inf)
        acc = metropolis_accept(self.rng, log_ratio)
        st.psi = np.where(acc, new_psi, st.psi)
        self._record("psi", acc)
        return acc

    def sample_tau(self) -> None:
        """Step 7: component-wise MH on allocated atoms and fixed-item thresholds.

        Addresses with no allocated observation are redrawn from the prior.
        """
        L, st, data = self.layout, self.state, self.layout.data
        if L.n_mix:
            z = st.latents.z
            active = np.unique(z)
            theta_obs = st.theta[L.ex_mix]
            prop = self.proposals["tau"]
            acc_all = np.zeros((st.capacity + 1, L.m), dtype=bool)
            for l in range(L.m):
                cur = st.atoms[active]
                new = cur.copy()
                new[:, l] += prop.scale[active, l] * self.rng.standard_normal(active.size)
                proposed = st.atoms.copy()
                proposed[active] = new
                diff = (_pcm_loglik(L.y_mix, theta_obs, proposed[z])
                        - _pcm_loglik(L.y_mix, theta_obs, st.atoms[z]))
                ll = np.bincount(z, diff, minlength=st.capacity + 1)[active]
                lp = -0.5 * (np.einsum("ij,jk,ik->i", new, self.tau_prec, new)
                             - np.einsum("ij,jk,ik->i", cur, self.tau_prec, cur))
                acc = metropolis_accept(self.rng, ll + lp)
                st.atoms[active[acc]] = new[acc]
                acc_all[active, l] = acc
            attempted = np.zeros_like(acc_all)
            attempted[active] = True
            self._record("tau", acc_all, attempted)
            idle = np.ones(st.capacity + 1, dtype=bool)
            idle[0] = False
            idle[active] = False
            st.atoms[idle] = self._draw_prior_atoms(int(idle.sum()))
        if L.fixed_obs.size:
            prop = self.proposals["fixed_tau"]
            theta_obs = st.theta[L.ex_fix]
            acc_all = np.zeros((data.J, L.m_max), dtype=bool)
            attempted = np.zeros_like(acc_all)
            var = self.hyper.fixed_tau_var
            for l in range(L.m_max):
                items = L.fixed_coord_items[l]
                if not items.size:
                    continue
                cur = st.fixed_tau[items, l]
                new = cur + prop.scale[items, l] * self.rng.standard_normal(items.size)
                proposed = st.fixed_tau.copy()
                proposed[items, l] = new
                diff = (_pcm_loglik(L.y_fix, theta_obs, proposed[L.item_fix])
                        - _pcm_loglik(L.y_fix, theta_obs, st.fixed_tau[L.item_fix]))
                ll = np.bincount(L.item_fix, diff, minlength=data.J)[items]
                lp = -0.5 * (new**2 - cur**2) / var
                acc = metropolis_accept(self.rng, ll + lp)
                st.fixed_tau[items[acc], l] = new[acc]
                acc_all[items, l] = acc
                attempted[items, l] = True
            self._record("fixed_tau", acc_all, attempted)

    def stick_counts(self, state: Optional[ChainState] = None):
        """Beta update counts per address.

        ``first[h]``: allocations at ``h`` where ``h`` is not the top of the
        observation's own subset. ``later[h]``: allocations above ``h`` whose
        subset contains ``h`` (in ``"prefix"`` mode, all allocations above ``h``).
        """
        st = self.state if state is None else state
        L = self.layout
        size = st.capacity + 2
        z = st.latents.z
        lo, hi = self.pattern_bounds(st)
        g = L.obs_pattern
        if L.local:
            first = np.bincount(z[z != hi[g]], minlength=size)
        else:
            first = np.bincount(z, minlength=size)
        if self.config.allocation_target == "prefix" or not L.local:
            start = np.ones_like(z)
        else:
            start = lo[g]
        later = np.cumsum(np.bincount(start, minlength=size) - np.bincount(z, minlength=size))
        return first[:size - 1], later[:size - 1]

    def sample_upsilon(self) -> None:
        """Step 8: conjugate beta draw for every materialized stick."""
        L, st = self.layout, self.state
        if not L.n_mix:
            return
        first, later = self.stick_counts()
        a = 1.0 + first[1:]
        b = st.alpha + later[1:]
        st.sticks[1:] = np.clip(self.rng.beta(a, b), _STICK_LO, _STICK_HI)

    def sample_alpha(self) -> Optional["EscobarWestDraw"]:
        """Step 9: Escobar-West auxiliary-variable update of the concentration."""
        L, st, hyper = self.layout, self.state, self.hyper
        if hyper.alpha_fixed or not L.n_mix:
            return None
        n_clus = int(np.unique(st.latents.z).size)
        eta = float(self.rng.beta(st.alpha + 1.0, L.n_mix))
        u = float(self.rng.random())
        draw = escobar_west(hyper.a_alpha, hyper.b_alpha, n_clus, L.n_mix, eta, u)
        st.alpha = float(self.rng.gamma(draw.shape, 1.0 / draw.rate))
        return draw

    def _record(self, block, accepted, attempted=None):
        prop = self.proposals[block]
        prop.record(accepted, attempted)
        acc = np.asarray(accepted, dtype=bool)
        tried = acc.size if attempted is None else int(np.asarray(attempted).sum())
        self.acceptance[block][0] += int(acc.sum())
        self.acceptance[block][1] += tried

    # ------------------------------------------------------------- iteration
    def step(self) -> None:
        """One full sweep of steps 1-9."""
        self.iteration += 1
        self.sample_slice_u()
        self.sample_allocation_z()
        self.sample_theta()
        self.sample_sigma2()
        self.sample_gamma()
        self.sample_psi()
        self.sample_tau()
        self.sample_upsilon()
        self.sample_alpha()
        adapt = self.iteration <= self.config.burn_in
        for prop in self.proposals.values():
            prop.end_sweep(adapt=adapt)

    def acceptance_rates(self) -> dict:
        return {k: (a / t if t else None) for k, (a, t) in self.acceptance.items()}

    def snapshot(self) -> dict:
        """Record the quantities kept in the archive for the current state."""
        st, data = self.state, self.layout.data
        tau = self.obs_thresholds()
        eta = pcm_cumulative_eta(st.theta[data.examinee], tau)
        logp = eta - _lse(eta, axis=1)[:, None]
        p = np.exp(logp)
        k = np.arange(eta.shape[1])
        mean = p @ k
        var = np.maximum(p @ k**2 - mean**2, 0.0)
        c = np.cumsum(p, axis=1)
        r = self.rng.random(data.n) * c[:, -1]
        y_rep = (c <= r[:, None]).sum(axis=1).astype(np.int8)
        rec = {
            "theta": st.theta.copy(), "sigma2": st.sigma2, "alpha": st.alpha,
            "gamma": st.gamma.copy(), "psi": st.psi.copy(), "fixed_tau": st.fixed_tau.copy(),
            "z": st.latents.z.astype(np.int32), "obs_tau": st.atoms[st.latents.z].copy(),
            "y_rep": y_rep,
            "loglik": float(logp[np.arange(data.n), data.rating].sum()),
            "d": float(((data.rating - mean) ** 2 + var).sum()),
        }
        rec["mix"] = self.realized_mixtures()
        return rec

    def realized_mixtures(self):
        """``(lo, weights, atoms)`` of each pattern's current mixing distribution."""
        L, st = self.layout, self.state
        if not L.n_mix:
            return []
        lo, hi = self.pattern_bounds()
        if not L.local:
            hi = np.full(L.G, self._extend_global_tail())
        else:
            self._ensure_capacity(int(hi.max()))
        log_v, cum = _log_sticks(st.sticks)
        out = []
        for g in range(L.G):
            h = np.arange(lo[g], hi[g] + 1)
            w = np.exp(self._log_weight(h, lo[g], hi[g], log_v, cum, force_last=L.local))
            out.append((int(lo[g]), w, st.atoms[h].copy()))
        return out

    def state_dict(self) -> dict:
        return {"state": self.state, "rng": self.rng.bit_generator.state,
                "proposals": self.proposals, "acceptance": self.acceptance,
                "iteration": self.iteration}

    def load_state_dict(self, saved: dict) -> None:
        self.state = saved["state"]
        self.rng.bit_generator.state = saved["rng"]
        self.proposals = saved["proposals"]
        self.acceptance = saved["acceptance"]
        self.iteration = saved["iteration"]


@dataclass(frozen=True)
class EscobarWestDraw:
    eta: float
    u: float
    odds: float
    n_clus: int
    shape: float
    rate: float


def escobar_west(a_alpha, b_alpha, n_clus, n, eta, u) -> EscobarWestDraw:
    """Gamma shape/rate for the concentration given the auxiliary draws.

    The shape drops by one when ``u`` exceeds ``O / (1 + O)``.
    """
    rate = b_alpha - np.log(eta)
    odds = (a_alpha + n_clus - 1) / (rate * n)
    shape = a_alpha + n_clus - (1 if u > odds / (1 + odds) else 0)
    return EscobarWestDraw(eta, u, odds, n_clus, float(shape), float(rate))


def _collect(records, layout: ModelLayout, config: ChainConfig, hyper: HyperParams,
             iterations, metadata) -> PosteriorArchive:
    data = layout.data
    S = len(records)

    def stack(key, dtype=float, shape=()):
        if not S:
            return np.zeros((0, *shape), dtype=dtype)
        return np.asarray([r[key] for r in records], dtype=dtype)

    G = layout.G
    width = max((w.size for r in records for (_, w, _) in r["mix"]), default=0)
    mix_lo = np.zeros((S, G), dtype=np.int64)
    mix_w = np.zeros((S, G, width))
    mix_a = np.zeros((S, G, width, layout.m))
    for s, r in enumerate(records):
        for g, (lo, w, a) in enumerate(r["mix"]):
            mix_lo[s, g] = lo
            mix_w[s, g, :w.size] = w
            mix_a[s, g, :w.size] = a
    return PosteriorArchive(
        iterations=np.asarray(iterations, dtype=np.int64),
        theta=stack("theta", shape=(data.N,)),
        sigma2=stack("sigma2"), alpha=stack("alpha"),
        gamma=stack("gamma", shape=(layout.p,)), psi=stack("psi", shape=(layout.G,)),
        fixed_tau=stack("fixed_tau", shape=(data.J, layout.m_max)),
        z=stack("z", np.int32, (layout.n_mix,)),
        obs_tau=stack("obs_tau", shape=(layout.n_mix, layout.m)),
        y_rep=stack("y_rep", np.int8, (data.n,)),
        loglik=stack("loglik"), d_trace=stack("d"),
        mix_lo=mix_lo, mix_weights=mix_w, mix_atoms=mix_a,
        examinee=data.examinee, item=data.item, rating=data.rating,
        item_max=data.item_max, mixed_obs=layout.mixed_obs,
        obs_pattern=layout.obs_pattern, patterns=layout.patterns,
        metadata=metadata,
    )


def run_chain(data: RatingDataset, hyper: HyperParams, config: ChainConfig,
              mixture: str = "local", resume: Optional[str] = None) -> PosteriorArchive:
    """Run one chain and return its thinned post-burn-in draws.

    Step sizes adapt during burn-in only. With ``config.checkpoint_every``
    the complete sampler (state, proposals, random stream, draws so far) is
    pickled to ``config.checkpoint_path``; ``resume`` restarts from such a file.
    """
    sampler = SliceSampler(data, hyper, config, mixture=mixture)
    records, iterations = [], []
    if resume is not None:
        with open(resume, "rb") as fh:
            saved = pickle.load(fh)
        sampler.load_state_dict(saved["sampler"])
        records, iterations = saved["records"], saved["iterations"]
    while sampler.iteration < config.iterations:
        try:
            sampler.step()
        except SamplerError:
            dump = Path(f"ddprm-failure-chain{config.chain_id}.pkl")
            with dump.open("wb") as fh:
                pickle.dump(sampler.state_dict(), fh)
            logger.error("sampler failed at iteration %d; state written to %s",
                         sampler.iteration, dump)
            raise
        it = sampler.iteration
        if config.is_saved(it):
            records.append(sampler.snapshot())
            iterations.append(it)
        if config.progress_every and it % config.progress_every == 0:
            logger.info(json.dumps({
                "chain": config.chain_id, "iteration": it,
                "loglik": sampler.data_loglik(),
                "acceptance": sampler.acceptance_rates(),
                "alpha": sampler.state.alpha, "sigma2": sampler.state.sigma2,
            }, sort_keys=True))
        if config.checkpoint_every and it % config.checkpoint_every == 0:
            tmp = Path(str(config.checkpoint_path) + ".tmp")
            with tmp.open("wb") as fh:
                pickle.dump({"sampler": sampler.state_dict(), "records": records,
                             "iterations": iterations}, fh)
            tmp.replace(config.checkpoint_path)
    metadata = {
        "mixture": mixture,
        "config": {k: v for k, v in asdict(config).items()},
        "hyper": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                  for k, v in asdict(hyper).items()},
        "seed": config.seed, "chain_id": config.chain_id,
        "acceptance": sampler.acceptance_rates(),
        "m": sampler.layout.m,
    }
    return _collect(records, sampler.layout, config, hyper, iterations, metadata)
