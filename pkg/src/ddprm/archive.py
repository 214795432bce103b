"""Saved post-burn-in draws of a chain, with deterministic on-disk format."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import RatingDataset

# Fixed member timestamp so that identical archives are identical bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

ARRAY_FIELDS = (
    "iterations", "theta", "sigma2", "alpha", "gamma", "psi", "fixed_tau",
    "z", "obs_tau", "y_rep", "loglik", "d_trace", "mix_lo", "mix_weights", "mix_atoms",
    # layout
    "examinee", "item", "rating", "item_max", "mixed_obs", "obs_pattern", "patterns",
)


@dataclass
class PosteriorArchive:
    """Thinned post-burn-in draws plus the layout needed to interpret them.

    Per saved iteration ``s``:

    * ``theta[s]`` abilities, ``sigma2[s]``, ``alpha[s]``, ``gamma[s]``, ``psi[s]``
    * ``fixed_tau[s, j]`` thresholds of fixed-threshold items (NaN rows for
      mixed items, ``+inf`` beyond an item's own maximum category)
    * ``z[s, k]`` and ``obs_tau[s, k]``: allocated address and atom of the
      k-th mixed observation (``mixed_obs[k]`` indexes the data)
    * ``y_rep[s, i]`` posterior predictive draw for observation ``i``
    * ``d_trace[s]`` sum over observations of squared error plus variance
    * ``mix_lo[s, g]``, ``mix_weights[s, g]``, ``mix_atoms[s, g]``: the
      realized mixing distribution of pattern ``g`` (zero-padded weights)
    """

    iterations: np.ndarray
    theta: np.ndarray
    sigma2: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    psi: np.ndarray
    fixed_tau: np.ndarray
    z: np.ndarray
    obs_tau: np.ndarray
    y_rep: np.ndarray
    loglik: np.ndarray
    d_trace: np.ndarray
    mix_lo: np.ndarray
    mix_weights: np.ndarray
    mix_atoms: np.ndarray
    examinee: np.ndarray
    item: np.ndarray
    rating: np.ndarray
    item_max: np.ndarray
    mixed_obs: np.ndarray
    obs_pattern: np.ndarray
    patterns: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.iterations.size)

    @property
    def n_saved(self) -> int:
        return len(self)

    @property
    def mixture(self) -> str:
        return self.metadata.get("mixture", "local")

    @property
    def item_mixed(self) -> np.ndarray:
        flags = np.zeros(self.item_max.size, dtype=bool)
        flags[np.unique(self.item[self.mixed_obs])] = True
        return flags

    def dataset(self) -> RatingDataset:
        return RatingDataset(self.examinee, self.item, self.rating, self.item_max)

    def obs_thresholds(self, s: int) -> np.ndarray:
        """Threshold rows (n, m_max) in force for every observation at draw ``s``."""
        tau = self.fixed_tau[s][self.item].copy()
        if self.mixed_obs.size:
            m = self.obs_tau.shape[2]
            tau[self.mixed_obs, :m] = self.obs_tau[s]
            tau[self.mixed_obs, m:] = np.inf
        return tau

    def save(self, path) -> None:
        """Write an uncompressed ``.npz`` with fixed member timestamps."""
        path = Path(path)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in ARRAY_FIELDS:
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(getattr(self, name)),
                                          allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", _ZIP_EPOCH), buf.getvalue())
            meta = json.dumps(self.metadata, sort_keys=True, default=_json_default)
            zf.writestr(zipfile.ZipInfo("metadata.json", _ZIP_EPOCH), meta)

    @classmethod
    def load(cls, path) -> "PosteriorArchive":
        arrays = {}
        with zipfile.ZipFile(Path(path)) as zf:
            for name in ARRAY_FIELDS:
                with zf.open(f"{name}.npy") as fh:
                    arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()),
                                                            allow_pickle=False)
            metadata = json.loads(zf.read("metadata.json"))
        return cls(**arrays, metadata=metadata)

    @classmethod
    def concatenate(cls, archives) -> "PosteriorArchive":
        """Pool independent chains run on the same data."""
        archives = list(archives)
        if not archives:
            raise ValueError("nothing to concatenate")
        first = archives[0]
        for other in archives[1:]:
            if not (np.array_equal(other.rating, first.rating)
                    and np.array_equal(other.mixed_obs, first.mixed_obs)):
                raise ValueError("archives were fitted to different data")
        width = max(a.mix_weights.shape[2] for a in archives)
        pooled = {}
        for name in ARRAY_FIELDS[:12]:
            pooled[name] = np.concatenate([getattr(a, name) for a in archives])
        pooled["mix_lo"] = np.concatenate([a.mix_lo for a in archives])
        pooled["mix_weights"] = np.concatenate([_pad(a.mix_weights, width) for a in archives])
        pooled["mix_atoms"] = np.concatenate([_pad(a.mix_atoms, width) for a in archives])
        for name in ARRAY_FIELDS[15:]:
            pooled[name] = getattr(first, name)
        meta = dict(first.metadata)
        meta["chains"] = [a.metadata.get("chain_id") for a in archives]
        return cls(**pooled, metadata=meta)


def _pad(arr: np.ndarray, width: int) -> np.ndarray:
    extra = width - arr.shape[2]
    if extra == 0:
        return arr
    pad = [(0, 0)] * arr.ndim
    pad[2] = (0, extra)
    return np.pad(arr, pad)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
