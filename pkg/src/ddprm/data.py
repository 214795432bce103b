"""Long-format rating data: containers, validation and CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ConfigurationError


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RatingDataset:
    """Observations ``(examinee, item, rating)`` with optional covariates.

    Indices are stored 0-based; files and user-facing selectors are 1-based.
    ``item_max[j]`` is the highest category of item ``j``. Without explicit
    ``covariates`` each observation's covariate vector is the 0-1 indicator
    of its item.
    """

    examinee: np.ndarray
    item: np.ndarray
    rating: np.ndarray
    item_max: np.ndarray
    covariates: Optional[np.ndarray] = None

    def __post_init__(self):
        ex = np.asarray(self.examinee, dtype=np.intp)
        it = np.asarray(self.item, dtype=np.intp)
        y = np.asarray(self.rating, dtype=np.intp)
        mj = np.asarray(self.item_max, dtype=np.intp)
        if not (ex.ndim == it.ndim == y.ndim == 1 and ex.size == it.size == y.size):
            raise DataFormatError("examinee, item and rating must be 1-d arrays of equal length")
        if ex.size == 0:
            raise DataFormatError("dataset has no observations")
        if ex.min() < 0 or it.min() < 0:
            raise DataFormatError("indices must be non-negative")
        n_ex, n_it = ex.max() + 1, it.max() + 1
        if np.unique(ex).size != n_ex:
            raise DataFormatError("examinee indices are not contiguous")
        if mj.shape != (n_it,) or np.unique(it).size != n_it:
            raise DataFormatError("item indices are not contiguous or item_max has the wrong length")
        if np.any(mj < 1):
            raise DataFormatError("every item needs at least two categories")
        if np.any(y < 0) or np.any(y > mj[it]):
            bad = int(np.flatnonzero((y < 0) | (y > mj[it]))[0])
            raise DataFormatError(
                f"observation {bad}: rating {y[bad]} outside 0..{mj[it[bad]]}"
            )
        object.__setattr__(self, "examinee", ex)
        object.__setattr__(self, "item", it)
        object.__setattr__(self, "rating", y)
        object.__setattr__(self, "item_max", mj)
        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim != 2 or x.shape[0] != ex.size:
                raise DataFormatError("covariates must have one row per observation")
            if np.any(x < 0) or not np.all(np.isfinite(x)):
                raise DataFormatError("covariates must be finite and non-negative")
            object.__setattr__(self, "covariates", x)

    @property
    def n(self) -> int:
        return int(self.rating.size)

    @property
    def N(self) -> int:
        return int(self.examinee.max()) + 1

    @property
    def J(self) -> int:
        return int(self.item_max.size)

    @property
    def p(self) -> int:
        return self.J if self.covariates is None else self.covariates.shape[1]

    def covariate_matrix(self) -> np.ndarray:
        if self.covariates is not None:
            return self.covariates
        x = np.zeros((self.n, self.J))
        x[np.arange(self.n), self.item] = 1.0
        return x

    @classmethod
    def from_arrays(cls, examinee, item, rating, item_max=None, covariates=None,
                    one_based: bool = True) -> "RatingDataset":
        ex = np.asarray(examinee, dtype=np.intp) - int(one_based)
        it = np.asarray(item, dtype=np.intp) - int(one_based)
        y = np.asarray(rating, dtype=np.intp)
        if item_max is None:
            if it.size == 0 or it.min() < 0:
                raise DataFormatError("item indices must start at 1")
            item_max = np.zeros(it.max() + 1, dtype=np.intp)
            np.maximum.at(item_max, it, y)
            item_max = np.maximum(item_max, 1)
        return cls(ex, it, y, np.asarray(item_max), covariates)

    def to_array(self) -> np.ndarray:
        """Estimator input: rows ``(examinee, item, rating[, x...])``, 1-based indices."""
        cols = [self.examinee + 1, self.item + 1, self.rating]
        X = np.column_stack(cols).astype(float)
        return X if self.covariates is None else np.hstack([X, self.covariates])

    def to_csv(self, path) -> None:
        path = Path(path)
        header = ["examinee", "item", "rating"]
        if self.covariates is not None:
            header += [f"x{k + 1}" for k in range(self.covariates.shape[1])]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.n):
                row = [self.examinee[i] + 1, self.item[i] + 1, self.rating[i]]
                if self.covariates is not None:
                    row += [repr(float(v)) for v in self.covariates[i]]
                w.writerow(row)


def read_ratings(path, item_max=None) -> RatingDataset:
    """Read a ``examinee,item,rating[,x1..xp]`` CSV (1-based indices)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if header[:3] != ["examinee", "item", "rating"]:
            raise DataFormatError(f"{path}: header must start with examinee,item,rating")
        n_cov = len(header) - 3
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [int(row[0]), int(row[1]), int(row[2])] + [float(c) for c in row[3:]]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field") from None
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no observations")
    arr = np.array(rows, dtype=float)
    cov = arr[:, 3:] if n_cov else None
    return RatingDataset.from_arrays(arr[:, 0].astype(int), arr[:, 1].astype(int),
                                     arr[:, 2].astype(int), item_max=item_max, covariates=cov)


def check_rating_array(X, n_covariates: Optional[int] = None) -> np.ndarray:
    """Validate an estimator input of rows ``(examinee, item, rating[, x...])``."""
    from sklearn.utils.validation import check_array

    X = check_array(X, dtype=float, ensure_min_samples=1)
    if X.shape[1] < 3:
        raise ValueError(f"expected at least 3 columns (examinee, item, rating), got {X.shape[1]}")
    if not np.all(X[:, :3] == np.round(X[:, :3])):
        raise ValueError("examinee, item and rating columns must hold integers")
    if n_covariates is not None and X.shape[1] - 3 not in (0, n_covariates):
        raise ConfigurationError(f"expected {n_covariates} covariate columns, got {X.shape[1] - 3}")
    return X


def dataset_from_array(X, item_max=None) -> RatingDataset:
    X = check_rating_array(X)
    cov = X[:, 3:] if X.shape[1] > 3 else None
    return RatingDataset.from_arrays(X[:, 0].astype(int), X[:, 1].astype(int),
                                     X[:, 2].astype(int), item_max=item_max, covariates=cov)
