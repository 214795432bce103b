"""Batch-adaptive random-walk step sizes (Roberts & Rosenthal, 2009)."""

from __future__ import annotations

import numpy as np

TARGET_ACCEPTANCE = 0.44


class AdaptiveProposal:
    """Per-scalar Gaussian random-walk scales tuned in batches.

    After every ``batch_size`` recorded sweeps each scalar's log scale moves
    by ``min(max_delta, b**-0.5)`` (``b`` the batch number) up when its batch
    acceptance rate exceeds ``target`` and down otherwise. Scalars that were
    never attempted in a batch keep their scale.
    """

    def __init__(self, shape, initial_scale=1.0, batch_size=50,
                 target=TARGET_ACCEPTANCE, max_delta=0.01):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.log_scale = np.full(shape, np.log(initial_scale), dtype=float)
        self.initial_scale = float(initial_scale)
        self.batch_size = int(batch_size)
        self.target = float(target)
        self.max_delta = float(max_delta)
        self.accepted = np.zeros(shape, dtype=np.int64)
        self.attempted = np.zeros(shape, dtype=np.int64)
        self.n_batches = 0
        self._sweeps = 0

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def record(self, accepted, attempted=None):
        accepted = np.asarray(accepted, dtype=bool)
        self.accepted += accepted
        self.attempted += True if attempted is None else np.asarray(attempted, dtype=bool)

    def end_sweep(self, adapt: bool = True) -> None:
        self._sweeps += 1
        if self._sweeps % self.batch_size:
            return
        if adapt:
            with np.errstate(invalid="ignore", divide="ignore"):
                rates = self.accepted / self.attempted
            self.adapt(rates)
        self.accepted[...] = 0
        self.attempted[...] = 0

    def adapt(self, rates) -> None:
        """Apply one batch of adaptation given per-scalar acceptance rates (NaN = skip)."""
        self.n_batches += 1
        delta = min(self.max_delta, self.n_batches ** -0.5)
        rates = np.asarray(rates, dtype=float)
        step = np.where(rates > self.target, delta, -delta)
        self.log_scale += np.where(np.isnan(rates), 0.0, step)

    def grow(self, size: int) -> None:
        """Extend the leading axis to ``size`` rows at the initial scale."""
        extra = size - self.log_scale.shape[0]
        if extra <= 0:
            return
        tail = self.log_scale.shape[1:]
        self.log_scale = np.concatenate(
            [self.log_scale, np.full((extra, *tail), np.log(self.initial_scale))])
        self.accepted = np.concatenate([self.accepted, np.zeros((extra, *tail), np.int64)])
        self.attempted = np.concatenate([self.attempted, np.zeros((extra, *tail), np.int64)])


def adapt_proposal(proposal: AdaptiveProposal, acceptance_rates) -> AdaptiveProposal:
    proposal.adapt(acceptance_rates)
    return proposal


def metropolis_accept(rng, log_ratio) -> np.ndarray:
    """Vectorized accept/reject; NaN or -inf ratios are rejected."""
    log_ratio = np.asarray(log_ratio, dtype=float)
    u = rng.random(log_ratio.shape)
    with np.errstate(divide="ignore"):
        return np.nan_to_num(log_ratio, nan=-np.inf) > np.log(u)
