"""Prior hyperparameters, log prior densities and parameter fixing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .model import ConfigurationError

LOG_2PI = np.log(2.0 * np.pi)

FIXABLE = ("sigma2", "psi", "alpha")


@dataclass(frozen=True)
class HyperParams:
    """Every prior hyperparameter of the model.

    Gamma and inverse-gamma priors use shape/rate. ``tau_var`` is the
    scalar ``c`` of the atom prior covariance ``c * I``; ``tau_cov`` may
    override it with a full matrix. Items not listed in ``mixed_items``
    (1-based; ``None`` means all) get their own thresholds with prior
    covariance ``fixed_tau_var * I``.
    """

    a_sigma2: float = 1.0
    b_sigma2: float = 1.0
    tau_var: float = 2.0
    tau_cov: Optional[np.ndarray] = None
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    a_gamma: float = 1.0
    b_gamma: float = 745.0
    a_psi: float = 0.5
    b_psi: float = 20.0
    fixed_sigma2: Optional[float] = None
    fixed_psi: Optional[float] = None
    fixed_alpha: Optional[float] = None
    fixed_tau_var: float = 10.0
    mixed_items: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        for name in ("a_sigma2", "b_sigma2", "tau_var", "a_alpha", "b_alpha", "fixed_tau_var"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for lo, hi in (("a_gamma", "b_gamma"), ("a_psi", "b_psi")):
            a, b = getattr(self, lo), getattr(self, hi)
            if not (np.isfinite(a) and np.isfinite(b)) or a > b:
                raise ConfigurationError(f"uniform bounds {lo}={a}, {hi}={b} are invalid")
        if self.a_gamma <= 0:
            raise ConfigurationError("gamma coefficients must be positive")
        lowest_psi = self.psi_value if self.psi_value is not None else self.a_psi
        if lowest_psi < 0.5:
            raise ConfigurationError("neighborhood radius must be at least 0.5")
        for name in ("fixed_sigma2", "fixed_alpha"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.tau_cov is not None:
            cov = np.asarray(self.tau_cov, dtype=float)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ConfigurationError("tau_cov must be a square matrix")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ConfigurationError("tau_cov must be positive definite") from None
            object.__setattr__(self, "tau_cov", cov)
        if self.mixed_items is not None:
            object.__setattr__(self, "mixed_items", tuple(int(j) for j in self.mixed_items))

    @property
    def psi_value(self) -> Optional[float]:
        """The constant radius when psi is fixed, else ``None``."""
        if self.fixed_psi is not None:
            return float(self.fixed_psi)
        if self.a_psi == self.b_psi:
            return float(self.a_psi)
        return None

    @property
    def sigma2_fixed(self) -> bool:
        return self.fixed_sigma2 is not None

    @property
    def alpha_fixed(self) -> bool:
        return self.fixed_alpha is not None

    def atom_covariance(self, m: int) -> np.ndarray:
        if self.tau_cov is not None:
            if self.tau_cov.shape != (m, m):
                raise ConfigurationError(
                    f"tau_cov has shape {self.tau_cov.shape}, expected {(m, m)}"
                )
            return self.tau_cov
        return self.tau_var * np.eye(m)

    def fix(self, block: str, value: float) -> "HyperParams":
        return fix_parameter(self, block, value)


def fix_parameter(hyper: HyperParams, block: str, value: float) -> HyperParams:
    """Return a copy of ``hyper`` that holds ``block`` constant at ``value``."""
    if block not in FIXABLE:
        raise ConfigurationError(f"cannot fix unknown block {block!r}; choose from {FIXABLE}")
    return dataclasses.replace(hyper, **{f"fixed_{block}": float(value)})


def log_prior_theta(theta, sigma2: float) -> float:
    """Sum of ``log n(theta_t | 0, sigma2)``."""
    if not sigma2 > 0:
        raise ConfigurationError("sigma2 must be positive")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return float(-0.5 * theta.size * (LOG_2PI + np.log(sigma2)) - 0.5 * theta @ theta / sigma2)


def log_prior_tau(tau, cov) -> float:
    """Multivariate normal ``log n_m(tau | 0, cov)``; scalar ``cov`` means ``cov * I``."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    m = tau.size
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        if not cov > 0:
            raise ConfigurationError("tau prior variance must be positive")
        cov = float(cov) * np.eye(m)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ConfigurationError("tau prior covariance must be positive definite") from None
    z = np.linalg.solve(chol, tau)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (m * LOG_2PI + logdet + z @ z))


def log_uniform(values, bounds: Sequence[float]) -> float:
    a, b = bounds
    if not a < b:
        raise ConfigurationError(f"uniform bounds ({a}, {b}) are degenerate")
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if np.any((values < a) | (values > b)):
        return -np.inf
    return float(-values.size * np.log(b - a))


def log_prior_gamma(gamma, bounds: Sequence[float]) -> float:
    return log_uniform(gamma, bounds)


def log_prior_psi(psi, bounds: Sequence[float]) -> float:
    return log_uniform(psi, bounds)


def log_prior_sigma2(sigma2: float, a: float, b: float) -> float:
    """Inverse-gamma log density, shape ``a`` and rate ``b``."""
    if sigma2 <= 0:
        return -np.inf
    return float(a * np.log(b) - special.gammaln(a) - (a + 1) * np.log(sigma2) - b / sigma2)


def log_prior_alpha(alpha: float, a: float, b: float) -> float:
    """Gamma log density, shape ``a`` and rate ``b``."""
    if alpha <= 0:
        return -np.inf
    return float(a * np.log(b) - special.gammaln(a) + (a - 1) * np.log(alpha) - b * alpha)


def log_prior_stick(upsilon, alpha: float) -> float:
    """``sum log beta(upsilon_h | 1, alpha)``."""
    upsilon = np.atleast_1d(np.asarray(upsilon, dtype=float))
    if np.any((upsilon <= 0) | (upsilon >= 1)):
        return -np.inf
    return float(upsilon.size * np.log(alpha) + (alpha - 1) * np.log1p(-upsilon).sum())
