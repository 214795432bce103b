"""scikit-learn style wrapper around the sampler."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .analysis import _pattern_for
from .comparison import PredictionTable, d_criterion
from .data import check_rating_array, dataset_from_array
from .model import pcm_cumulative_eta
from .priors import HyperParams
from .sampler import ChainConfig, run_chain


class DDPRatingModel(BaseEstimator):
    """Bayesian rating model with covariate-localized threshold mixtures.

    ``fit`` takes rows ``(examinee, item, rating[, x1..xp])`` with 1-based
    examinee and item indices. Optional columns replace the default
    item-dummy covariate design.

    Parameters
    ----------
    mixture : {"local", "global", "none"}
        Localized mixture, one shared mixture, or fixed thresholds only.
    mixed_items : tuple of int, optional
        1-based items whose thresholds are mixed; ``None`` mixes all.
    iterations, burn_in, thin : int
        Chain length, discarded prefix and thinning interval.
    random_state : int
        Seed of the chain.
    tau_var, fixed_tau_var : float
        Prior variances of mixture atoms and of fixed-item thresholds.
    gamma_bounds, psi_bounds : tuple of float
        Uniform prior bounds of the coefficients and radii.
    fixed_psi, fixed_sigma2, fixed_alpha : float, optional
        Hold a parameter constant instead of sampling it.

    Attributes
    ----------
    archive_ : PosteriorArchive
        Saved draws of the fitted chain.
    n_examinees_, n_items_ : int
    """

    def __init__(self, mixture: str = "local", mixed_items: Optional[tuple] = None,
                 iterations: int = 2000, burn_in: int = 1000, thin: int = 1,
                 random_state: int = 0, tau_var: float = 2.0, fixed_tau_var: float = 10.0,
                 gamma_bounds: tuple = (1.0, 745.0), psi_bounds: tuple = (0.5, 20.0),
                 fixed_psi: Optional[float] = None, fixed_sigma2: Optional[float] = None,
                 fixed_alpha: Optional[float] = None):
        self.mixture = mixture
        self.mixed_items = mixed_items
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.random_state = random_state
        self.tau_var = tau_var
        self.fixed_tau_var = fixed_tau_var
        self.gamma_bounds = gamma_bounds
        self.psi_bounds = psi_bounds
        self.fixed_psi = fixed_psi
        self.fixed_sigma2 = fixed_sigma2
        self.fixed_alpha = fixed_alpha

    def _hyper(self) -> HyperParams:
        return HyperParams(
            tau_var=self.tau_var, fixed_tau_var=self.fixed_tau_var,
            a_gamma=self.gamma_bounds[0], b_gamma=self.gamma_bounds[1],
            a_psi=self.psi_bounds[0], b_psi=self.psi_bounds[1],
            fixed_psi=self.fixed_psi, fixed_sigma2=self.fixed_sigma2,
            fixed_alpha=self.fixed_alpha,
            mixed_items=None if self.mixed_items is None else tuple(self.mixed_items))

    def fit(self, X, y=None):
        data = dataset_from_array(X)
        config = ChainConfig(self.iterations, self.burn_in, self.thin, int(self.random_state))
        self.archive_ = run_chain(data, self._hyper(), config, mixture=self.mixture)
        self.n_examinees_ = data.N
        self.n_items_ = data.J
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Posterior predictive category probabilities, shape ``(n, m_max + 1)``.

        Only the examinee and item columns of ``X`` are used; both must have
        been seen during ``fit``.
        """
        check_is_fitted(self, "archive_")
        X = check_rating_array(np.column_stack([np.asarray(X)[:, :2], np.zeros(len(X))]))
        ex = X[:, 0].astype(int) - 1
        it = X[:, 1].astype(int) - 1
        if ex.min() < 0 or ex.max() >= self.n_examinees_ or it.min() < 0 \
                or it.max() >= self.n_items_:
            raise ValueError("examinee or item index not seen during fit")
        arc = self.archive_
        m_max = int(arc.item_max.max())
        out = np.zeros((ex.size, m_max + 1))
        S = len(arc)
        for j in np.unique(it):
            rows = np.flatnonzero(it == j)
            theta = arc.theta[:, ex[rows]]
            g = _pattern_for(arc, j + 1, None)
            if g is None:
                m = int(arc.item_max[j])
                weights = np.ones((S, 1))
                atoms = arc.fixed_tau[:, j, None, :m]
            else:
                weights = arc.mix_weights[:, g]
                atoms = arc.mix_atoms[:, g]
                m = atoms.shape[2]
            weights = weights / weights.sum(axis=1, keepdims=True)
            acc = np.zeros((rows.size, m + 1))
            for s in range(S):
                keep = np.flatnonzero(weights[s] > 0)
                W = keep.size
                eta = pcm_cumulative_eta(np.repeat(theta[s], W),
                                         np.tile(atoms[s, keep], (rows.size, 1)))
                p = np.exp(eta - eta.max(axis=1, keepdims=True))
                p /= p.sum(axis=1, keepdims=True)
                acc += (p.reshape(rows.size, W, m + 1) * weights[s, keep, None]).sum(axis=1)
            out[rows, :m + 1] = acc / S
        return out

    def predict(self, X) -> np.ndarray:
        """Posterior predictive mean rating for each row."""
        p = self.predict_proba(X)
        return p @ np.arange(p.shape[1])

    def prediction_table(self) -> PredictionTable:
        check_is_fitted(self, "archive_")
        return PredictionTable.from_archive(self.archive_, self.mixture)

    def criterion(self) -> tuple[float, float, float]:
        """Posterior predictive loss ``(D, GF, Pen)`` on the training data."""
        return tuple(d_criterion(self.prediction_table()))
