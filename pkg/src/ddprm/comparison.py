"""Posterior predictive loss for fitted models and the in-engine baselines."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import batch_means_mcci, predictive_moments
from .archive import PosteriorArchive
from .data import DataFormatError, RatingDataset
from .priors import HyperParams
from .sampler import ChainConfig, run_chain

TABLE_COLUMNS = ("obs_index", "y", "E", "Var")


@dataclass
class PredictionTable:
    """Observed ratings with predictive means and variances under one model.

    ``d_trace`` holds the per-draw criterion when the table comes from a
    sampler run; it gives the Monte Carlo error of ``D``.
    """

    y: np.ndarray
    E: np.ndarray
    Var: np.ndarray
    label: str = "model"
    d_trace: Optional[np.ndarray] = None
    archive: Optional[PosteriorArchive] = dataclasses.field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.E = np.asarray(self.E, dtype=float)
        self.Var = np.asarray(self.Var, dtype=float)
        if not (self.y.shape == self.E.shape == self.Var.shape) or self.y.ndim != 1:
            raise ValueError("y, E and Var must be 1-d arrays of equal length")
        if np.any(self.Var < 0):
            raise ValueError("predictive variances must be non-negative")

    def __len__(self) -> int:
        return self.y.size

    @classmethod
    def from_archive(cls, archive: PosteriorArchive, label: str = "model") -> "PredictionTable":
        E, Var = predictive_moments(archive)
        return cls(archive.rating, E, Var, label, np.asarray(archive.d_trace, dtype=float),
                   archive)

    def mcci(self) -> Optional[float]:
        """Batch-means half-width for ``D``, if a long enough trace is attached."""
        if self.d_trace is None or self.d_trace.size < 100:
            return None
        return batch_means_mcci(self.d_trace)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for i in range(len(self)):
                w.writerow([i, format(self.y[i], ".17g"), format(self.E[i], ".17g"),
                            format(self.Var[i], ".17g")])


@dataclass(frozen=True)
class Criterion:
    D: float
    GF: float
    Pen: float

    def __iter__(self):
        return iter((self.D, self.GF, self.Pen))


def d_criterion(table: PredictionTable) -> Criterion:
    """``GF = sum (y - E)^2``, ``Pen = sum Var`` and ``D = GF + Pen``."""
    if not (table.y.size == table.E.size == table.Var.size):
        raise ValueError("prediction table columns differ in length")
    gf = float(np.sum((table.y - table.E) ** 2))
    pen = float(np.sum(table.Var))
    return Criterion(gf + pen, gf, pen)


def fit_pcm_baseline(data: RatingDataset, hyper: HyperParams,
                     config: ChainConfig) -> PredictionTable:
    """Every item with its own fixed thresholds, same sampler otherwise."""
    archive = run_chain(data, hyper, config, mixture="none")
    return PredictionTable.from_archive(archive, "PCM")


def dp_pcm_hyper(hyper: HyperParams) -> HyperParams:
    """Covariate-free baseline priors: alpha = 1, identity atom covariance, sigma2 = 1."""
    return dataclasses.replace(hyper, fixed_alpha=1.0, tau_var=1.0, tau_cov=None,
                               fixed_sigma2=1.0)


def fit_dp_pcm_baseline(data: RatingDataset, hyper: HyperParams,
                        config: ChainConfig) -> PredictionTable:
    """One global stick-breaking sequence shared by every mixed item."""
    archive = run_chain(data, dp_pcm_hyper(hyper), config, mixture="global")
    return PredictionTable.from_archive(archive, "DP-PCM")


def import_external_predictions(path, label: Optional[str] = None) -> PredictionTable:
    """Read an ``obs_index,y,E,Var`` CSV written by any external fitting tool."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(TABLE_COLUMNS):
            raise DataFormatError(f"{path}:1: header must be {','.join(TABLE_COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                idx = int(row[0])
                y, e, v = (float(c) for c in row[1:])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: malformed row {row}") from None
            if not all(np.isfinite((y, e, v))):
                raise DataFormatError(f"{path}:{lineno}: non-finite value")
            if v < 0:
                raise DataFormatError(f"{path}:{lineno}: negative variance {v}")
            if idx != len(rows):
                raise DataFormatError(
                    f"{path}:{lineno}: obs_index {idx} breaks the sequence (expected {len(rows)})")
            rows.append((y, e, v))
    if not rows:
        raise DataFormatError(f"{path}: no prediction rows")
    arr = np.array(rows)
    return PredictionTable(arr[:, 0], arr[:, 1], arr[:, 2], label or path.stem)


def export_predictions(table: PredictionTable, path) -> Path:
    table.to_csv(path)
    return Path(path)


def compare(tables: Sequence[PredictionTable]) -> list[dict]:
    """One row per model (D, GF, Pen, MCCI), sorted by D."""
    tables = list(tables)
    if not tables:
        raise ValueError("nothing to compare")
    n = len(tables[0])
    for t in tables[1:]:
        if len(t) != n:
            raise ValueError(f"table {t.label!r} has {len(t)} rows, expected {n}")
        if not np.array_equal(t.y, tables[0].y):
            raise ValueError(f"table {t.label!r} was computed on different ratings")
    rows = []
    for t in tables:
        crit = d_criterion(t)
        rows.append({"model": t.label, "D": crit.D, "GF": crit.GF, "Pen": crit.Pen,
                     "mcci": t.mcci()})
    rows.sort(key=lambda r: r["D"])
    return rows


def write_report(rows: list[dict], path) -> Path:
    Path(path).write_text(json.dumps({"models": rows}, indent=2, sort_keys=True) + "\n")
    return Path(path)
