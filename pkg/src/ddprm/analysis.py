"""Posterior summaries computed from a :class:`PosteriorArchive`."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .archive import PosteriorArchive
from .model import pcm_cumulative_eta, pcm_moments

GRID_POINTS = 512
MODE_FLOOR = 0.05
QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


def _require_draws(archive: PosteriorArchive):
    if len(archive) == 0:
        raise ValueError("archive holds no saved draws")


# ------------------------------------------------------------ predictive
def predictive_moments(archive: PosteriorArchive) -> tuple[np.ndarray, np.ndarray]:
    """Posterior predictive mean and variance of every observation.

    The variance combines the average within-draw PCM variance with the
    spread of the within-draw means (law of total variance).
    """
    _require_draws(archive)
    n = archive.rating.size
    mean_sum = np.zeros(n)
    mean_sq = np.zeros(n)
    var_sum = np.zeros(n)
    for s in range(len(archive)):
        mu, var = pcm_moments(archive.theta[s][archive.examinee], archive.obs_thresholds(s))
        mean_sum += mu
        mean_sq += mu * mu
        var_sum += var
    S = len(archive)
    E = mean_sum / S
    Var = var_sum / S + np.maximum(mean_sq / S - E * E, 0.0)
    return E, Var


def predictive_mean_var(archive: PosteriorArchive, obs_index: int) -> tuple[float, float]:
    """``(E_n, Var_n)`` for one observation (0-based index into the data)."""
    _require_draws(archive)
    i = int(obs_index)
    if not 0 <= i < archive.rating.size:
        raise IndexError(f"observation {i} out of range")
    t, j = archive.examinee[i], archive.item[i]
    tau = archive.fixed_tau[:, j].copy()
    k = np.searchsorted(archive.mixed_obs, i)
    if k < archive.mixed_obs.size and archive.mixed_obs[k] == i:
        m = archive.obs_tau.shape[2]
        tau[:, :m] = archive.obs_tau[:, k]
        tau[:, m:] = np.inf
    mu, var = pcm_moments(archive.theta[:, t], tau)
    E = float(mu.mean())
    return E, float(var.mean() + np.mean((mu - E) ** 2))


def _pattern_for(archive: PosteriorArchive, item: Optional[int], x) -> Optional[int]:
    if x is not None:
        x = np.asarray(x, dtype=float)
        if archive.mixture != "local":
            return 0
        hits = np.flatnonzero(np.all(archive.patterns == x, axis=1))
        if not hits.size:
            raise KeyError(f"unknown covariate pattern {x.tolist()}")
        return int(hits[0])
    if item is None:
        raise ValueError("give either an item or a covariate pattern")
    j = int(item) - 1
    if not 0 <= j < archive.item_max.size:
        raise KeyError(f"unknown item {item}")
    if not archive.item_mixed[j]:
        return None
    k = np.flatnonzero(archive.item[archive.mixed_obs] == j)
    pats = np.unique(archive.obs_pattern[k])
    if pats.size != 1:
        raise KeyError(f"item {item} spans several covariate patterns; pass x explicitly")
    return int(pats[0])


def predictive_pmf(archive: PosteriorArchive, item: Optional[int] = None, x=None,
                   theta="integrate", n_draws: int = 20, seed: int = 0) -> np.ndarray:
    """Posterior predictive category probabilities for one item or pattern.

    ``theta`` is an ability value, or ``"integrate"`` to average over fresh
    draws ``theta ~ n(0, sigma2)`` from each saved state.
    """
    _require_draws(archive)
    g = _pattern_for(archive, item, x)
    S = len(archive)
    rng = np.random.default_rng(seed)
    if isinstance(theta, str):
        if theta != "integrate":
            raise ValueError("theta must be a number or 'integrate'")
        thetas = rng.standard_normal((S, n_draws)) * np.sqrt(archive.sigma2)[:, None]
    else:
        thetas = np.full((S, 1), float(theta))
    if g is None:
        j = int(item) - 1
        m = int(archive.item_max[j])
        taus = archive.fixed_tau[:, j, :m]
        weights = np.ones((S, 1))
        atoms = taus[:, None, :]
    else:
        weights = archive.mix_weights[:, g]
        atoms = archive.mix_atoms[:, g]
        m = atoms.shape[2]
    weights = weights / weights.sum(axis=1, keepdims=True)
    pmf = np.zeros(m + 1)
    W = weights.shape[1]
    for d in range(thetas.shape[1]):
        th = np.repeat(thetas[:, d], W)
        eta = pcm_cumulative_eta(th, atoms.reshape(S * W, m))
        p = np.exp(eta - eta.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        pmf += (weights.reshape(S * W, 1) * p).sum(axis=0)
    pmf /= S * thetas.shape[1]
    return pmf / pmf.sum()


# --------------------------------------------------------------- density
@dataclass
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    modes: list = field(default_factory=list)
    sample_mean: float = float("nan")
    sample_sd: float = float("nan")
    n_samples: int = 0

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid", "density"])
            for g, d in zip(self.grid, self.density):
                w.writerow([format(g, ".17g"), format(d, ".17g")])


def silverman_bandwidth(values, n_draws: Optional[int] = None) -> float:
    """``0.9 * min(sd, IQR / 1.34) * S**-0.2``.

    ``S`` defaults to the number of values. For draws pooled over many
    observations of each saved state, pass the number of saved states.
    """
    values = np.asarray(values, dtype=float)
    S = values.size if n_draws is None else int(n_draws)
    sd = values.std()
    q75, q25 = np.percentile(values, [75, 25])
    scale = max(1.0, float(np.abs(values).max()))
    # treat round-off level spread as zero
    tiny = 1e-12 * scale
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= tiny:
        spread = max(sd, (q75 - q25) / 1.34)
    if spread <= tiny:
        # degenerate sample: a narrow bump relative to the value's magnitude
        return 1e-3 * scale
    return 0.9 * spread * S ** -0.2


def kde(values, bandwidth: Optional[float] = None, n_grid: int = GRID_POINTS,
        floor: float = MODE_FLOOR, n_draws: Optional[int] = None) -> DensityEstimate:
    """Gaussian KDE on a grid spanning the data range plus three bandwidths."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("no samples")
    h = silverman_bandwidth(values, n_draws) if bandwidth is None else float(bandwidth)
    grid = np.linspace(values.min() - 3 * h, values.max() + 3 * h, n_grid)
    uniq, counts = np.unique(values, return_counts=True)
    dens = np.zeros(n_grid)
    for start in range(0, uniq.size, 4096):
        u = uniq[start:start + 4096]
        c = counts[start:start + 4096]
        dens += c @ np.exp(-0.5 * ((grid[None, :] - u[:, None]) / h) ** 2)
    # the grid drops the kernel tails beyond three bandwidths; renormalize on the grid
    dens /= np.trapezoid(dens, grid)
    est = DensityEstimate(grid, dens, h, sample_mean=float(values.mean()),
                          sample_sd=float(values.std()), n_samples=int(values.size))
    est.modes = find_modes(est, floor)
    return est


def find_modes(density: DensityEstimate, floor: float = MODE_FLOOR) -> list:
    """Local maxima of a gridded density at or above ``floor * max``.

    A point is a maximum when it is strictly above its left neighbour and
    not below its right one (the first point of a flat top). Returned as
    ``(location, height)`` pairs, tallest first.
    """
    d = np.asarray(density.density, dtype=float)
    if d.size < 3:
        return []
    inner = np.arange(1, d.size - 1)
    is_max = (d[inner] > d[inner - 1]) & (d[inner] >= d[inner + 1])
    idx = inner[is_max & (d[inner] >= floor * d.max())]
    idx = idx[np.argsort(-d[idx], kind="stable")]
    return [(float(density.grid[i]), float(d[i])) for i in idx]


def mixing_samples(archive: PosteriorArchive, item: Optional[int] = None,
                   pattern: Optional[int] = None, threshold: int = 1) -> np.ndarray:
    """Pooled draws of ``tau_{z_i, l}`` over observations of an item or pattern."""
    _require_draws(archive)
    if archive.mixed_obs.size == 0:
        raise ValueError("the archive has no mixed-threshold observations")
    if item is not None:
        j = int(item) - 1
        if not 0 <= j < archive.item_max.size:
            raise KeyError(f"unknown item {item}")
        if not archive.item_mixed[j]:
            raise ValueError(f"item {item} has fixed thresholds")
        cols = np.flatnonzero(archive.item[archive.mixed_obs] == j)
    elif pattern is not None:
        cols = np.flatnonzero(archive.obs_pattern == int(pattern))
        if not cols.size:
            raise KeyError(f"unknown pattern {pattern}")
    else:
        raise ValueError("give an item or a pattern")
    l = int(threshold) - 1
    if not 0 <= l < archive.obs_tau.shape[2]:
        raise IndexError(f"threshold {threshold} out of range")
    return archive.obs_tau[:, cols, l].ravel()


def mixing_density(archive: PosteriorArchive, item: Optional[int] = None,
                   pattern: Optional[int] = None, threshold: int = 1,
                   floor: float = MODE_FLOOR) -> DensityEstimate:
    """Density estimate of the posterior mean mixing distribution of one threshold.

    The bandwidth uses the number of saved states as its sample size, since
    draws pooled over observations within one state are not independent.
    """
    return kde(mixing_samples(archive, item, pattern, threshold), floor=floor,
               n_draws=len(archive))


# ----------------------------------------------------------------- traces
_SELECTOR = re.compile(r"^\s*(\w+)\s*(?:\[\s*([\d\s,]+)\])?\s*$")


def resolve_trace(archive: PosteriorArchive, selector: str) -> np.ndarray:
    """Scalar trace named by ``selector`` (1-based indices).

    ``theta[t]``, ``sigma2``, ``alpha``, ``gamma[k]``, ``psi[g]``,
    ``loglik``, ``d``, and ``tau[j,l]``: the threshold of a fixed item, or
    for a mixed item the per-draw mean of ``tau_{z_i,l}`` over its observations.
    """
    match = _SELECTOR.match(selector)
    if not match:
        raise KeyError(f"cannot parse selector {selector!r}")
    name, idx = match.group(1), match.group(2)
    index = [int(v) - 1 for v in idx.split(",")] if idx else []
    scalars = {"sigma2": archive.sigma2, "alpha": archive.alpha,
               "loglik": archive.loglik, "d": archive.d_trace}
    try:
        if name in scalars and not index:
            return np.asarray(scalars[name], dtype=float)
        if name in ("theta", "gamma", "psi") and len(index) == 1:
            arr = getattr(archive, name)
            if not 0 <= index[0] < arr.shape[1]:
                raise IndexError
            return arr[:, index[0]]
        if name == "tau" and len(index) == 2:
            j, l = index
            if not (0 <= j < archive.item_max.size and 0 <= l < archive.item_max[j]):
                raise IndexError
            if archive.item_mixed[j]:
                cols = np.flatnonzero(archive.item[archive.mixed_obs] == j)
                return archive.obs_tau[:, cols, l].mean(axis=1)
            return archive.fixed_tau[:, j, l]
    except IndexError:
        raise KeyError(f"selector {selector!r} is out of range") from None
    raise KeyError(f"unknown selector {selector!r}")


def summarize(archive: PosteriorArchive, selector: str) -> dict:
    """Mean, population sd, median and quantiles of a scalar trace."""
    trace = resolve_trace(archive, selector)
    if trace.size == 0:
        raise ValueError("empty trace")
    q = np.quantile(trace, QUANTILES)
    out = {"mean": float(trace.mean()), "sd": float(trace.std()), "median": float(np.median(trace)),
           "quantiles": {str(p): float(v) for p, v in zip(QUANTILES, q)}}
    if trace.size >= 100:
        out["mcci_half_width"] = batch_means_mcci(trace)
    return out


def batch_means_mcci(trace, confidence: float = 0.95) -> float:
    """Half-width of the batch-means Monte Carlo interval for a trace mean.

    Uses ``floor(sqrt(S))`` batches of ``floor(sqrt(S))`` draws (leading
    draws beyond ``b * b`` are dropped).
    """
    trace = np.asarray(trace, dtype=float).ravel()
    S = trace.size
    if S < 100:
        raise ValueError(f"trace of length {S} is too short for batch means (need 100)")
    b = int(np.floor(np.sqrt(S)))
    a = S // b
    means = trace[S - a * b:].reshape(a, b).mean(axis=1)
    sd = means.std(ddof=1)
    if sd == 0:
        return 0.0
    t = stats.t.ppf(0.5 + confidence / 2, a - 1)
    return float(t * sd / np.sqrt(a))


def export_traces(archive: PosteriorArchive, selectors, path) -> Path:
    """Write ``iteration,<selector>...`` CSV rows at full double precision."""
    if isinstance(selectors, str):
        selectors = [selectors]
    traces = [resolve_trace(archive, s) for s in selectors]
    path = Path(path)
    try:
        fh = path.open("w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write traces to {path}: {exc}") from exc
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", *selectors])
        for s, it in enumerate(archive.iterations):
            w.writerow([int(it), *(format(float(t[s]), ".17g") for t in traces)])
    return path


def read_traces(path) -> dict:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[k]) for r in body]) for k, name in enumerate(header)}


# ---------------------------------------------------------------- reports
def threshold_summary(archive: PosteriorArchive, floor: float = MODE_FLOOR) -> list:
    """Per item and threshold: mean, sd and modes (mixed items) of its distribution."""
    rows = []
    mixed = archive.item_mixed
    for j in range(archive.item_max.size):
        for l in range(int(archive.item_max[j])):
            entry = {"item": j + 1, "threshold": l + 1, "mixed": bool(mixed[j])}
            if mixed[j]:
                dens = mixing_density(archive, item=j + 1, threshold=l + 1, floor=floor)
                entry.update(mean=dens.sample_mean, sd=dens.sample_sd,
                             modes=[loc for loc, _ in dens.modes])
            else:
                trace = archive.fixed_tau[:, j, l]
                entry.update(mean=float(trace.mean()), sd=float(trace.std()), modes=[])
            rows.append(entry)
    return rows


def summary_document(archive: PosteriorArchive, floor: float = MODE_FLOOR) -> dict:
    """JSON-ready summary: scalar parameters, thresholds, abilities and modes."""
    doc = {"n_saved": len(archive), "mixture": archive.mixture,
           "acceptance": archive.metadata.get("acceptance", {}), "parameters": {}}
    names = ["sigma2", "alpha"]
    names += [f"gamma[{k + 1}]" for k in range(archive.gamma.shape[1])]
    names += [f"psi[{g + 1}]" for g in range(archive.psi.shape[1])]
    for name in names:
        doc["parameters"][name] = summarize(archive, name)
    doc["thresholds"] = threshold_summary(archive, floor)
    theta_mean = archive.theta.mean(axis=0)
    doc["abilities"] = {"posterior_means": theta_mean.tolist(),
                        "range": [float(theta_mean.min()), float(theta_mean.max())],
                        "mean": float(theta_mean.mean()), "sd": float(theta_mean.std())}
    return doc


def modality(density: DensityEstimate) -> str:
    return "multimodal" if len(density.modes) > 1 else "unimodal"


def pooled(values: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in values])
