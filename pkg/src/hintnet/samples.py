"""Training samples: one (road cell, target day) pair viewed through a w x w
window over the previous seven days.

Feature tensors are z-scored per channel with statistics from the training
days only, zero-padded at the grid boundary and gathered into batches lazily,
so a :class:`SampleSet` never materializes every window at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import FeatureSet
from .model import Batch
from .subregion import AdjacencyCache

N_WINDOW = 7


@dataclass
class SubregionSample:
    center: tuple[int, int]
    day: int
    st_window: np.ndarray  # [7, w, w, n_st]
    temporal: np.ndarray  # [7, n_t]
    spatial_window: np.ndarray  # [w, w, n_s]
    adjacency: np.ndarray  # [w^2, w^2]
    target: float


def stack_samples(samples: Sequence[SubregionSample]) -> Batch:
    st = np.stack([s.st_window for s in samples]).astype(np.float64)
    B, T, w, _, n_st = st.shape
    return Batch(
        st=st.reshape(B, T, w * w, n_st),
        temporal=np.stack([s.temporal for s in samples]).astype(np.float64),
        spatial=np.stack([s.spatial_window for s in samples]).reshape(B, w * w, -1).astype(np.float64),
        adjacency=np.stack([s.adjacency for s in samples]).astype(np.float64),
        target=np.array([s.target for s in samples], dtype=np.float64),
    )


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, names: Sequence[str], binary: Sequence[str] = ()) -> "Standardizer":
        """Per-channel moments over every axis but the last; binary channels and
        zero-variance channels are left unscaled."""
        flat = values.reshape(-1, values.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        for j, name in enumerate(names):
            if name in binary:
                mean[j], std[j] = 0.0, 1.0
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


class PreparedData:
    """Standardized, padded feature tensors plus adjacencies for one window size."""

    def __init__(
        self,
        counts: np.ndarray,
        features: FeatureSet,
        mask: np.ndarray,
        train_days: Sequence[int],
        w: int,
    ):
        if w % 2 == 0:
            raise ValueError("w must be odd")
        self.counts = np.asarray(counts)
        self.mask = np.asarray(mask).astype(bool)
        self.features = features
        self.w = int(w)
        self.train_days = np.asarray(sorted(set(int(d) for d in train_days)), dtype=np.int64)
        if len(self.train_days) < 2:
            raise ValueError("need at least two training days")
        half = self.w // 2
        td = self.train_days

        self.temporal_scaler = Standardizer.fit(features.temporal[td], features.temporal_names, features.binary_temporal)
        self.spatial_scaler = Standardizer.fit(features.spatial, features.spatial_names, features.binary_spatial)
        self.st_scaler = Standardizer.fit(features.st[:, :, td], features.st_names, features.binary_st)

        self.temporal = self.temporal_scaler.apply(features.temporal)
        pad = ((half, half), (half, half), (0, 0))
        self.spatial = np.pad(self.spatial_scaler.apply(features.spatial), pad)
        self.st = np.pad(self.st_scaler.apply(features.st), pad + ((0, 0),))
        self.adjacency = AdjacencyCache(self.counts, td, self.w)
        self._offsets = np.arange(self.w)
        self._lags = np.arange(-N_WINDOW, 0)

    @property
    def num_days(self) -> int:
        return self.counts.shape[2]

    def batch(self, cells: np.ndarray, days: np.ndarray) -> Batch:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        days = np.asarray(days, dtype=np.int64)
        if np.any(days < N_WINDOW):
            raise ValueError("target day index must be >= 7")
        B, w = len(days), self.w
        R = cells[:, 0, None] + self._offsets
        C = cells[:, 1, None] + self._offsets
        T = days[:, None] + self._lags
        st = self.st[R[:, None, :, None], C[:, None, None, :], T[:, :, None, None]]
        sp = self.spatial[R[:, :, None], C[:, None, :]]
        adj = self.adjacency.stack([tuple(c) for c in cells.tolist()])
        return Batch(
            st=st.reshape(B, N_WINDOW, w * w, -1),
            temporal=self.temporal[T],
            spatial=sp.reshape(B, w * w, -1),
            adjacency=adj,
            target=self.counts[cells[:, 0], cells[:, 1], days].astype(np.float64),
        )

    def sample(self, cell, day) -> SubregionSample:
        b = self.batch(np.array([cell]), np.array([day]))
        w = self.w
        return SubregionSample(
            center=(int(cell[0]), int(cell[1])),
            day=int(day),
            st_window=b.st[0].reshape(N_WINDOW, w, w, -1),
            temporal=b.temporal[0],
            spatial_window=b.spatial[0].reshape(w, w, -1),
            adjacency=b.adjacency[0],
            target=float(b.target[0]),
        )


class SampleSet:
    """Sequence of (cell, day) samples backed by a :class:`PreparedData`."""

    def __init__(self, data: PreparedData, cells: np.ndarray, days: np.ndarray):
        self.data = data
        self.cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        self.days = np.asarray(days, dtype=np.int64)
        if len(self.cells) != len(self.days):
            raise ValueError("cells and days must have equal length")

    def __len__(self) -> int:
        return len(self.days)

    def __getitem__(self, i) -> SubregionSample:
        return self.data.sample(self.cells[i], self.days[i])

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return self.data.batch(self.cells[idx], self.days[idx])


def level_cells(levels: np.ndarray, mask: np.ndarray, level: int) -> np.ndarray:
    """Road cells carrying ``level``, row-major, as an [n, 2] array."""
    sel = (np.asarray(levels) == level) & np.asarray(mask).astype(bool)
    return np.argwhere(sel)


def make_samples(data: PreparedData, levels: np.ndarray, level: int, days: Sequence[int]) -> SampleSet:
    """All (road cell of ``level``, target day) samples; cell-major order."""
    days = np.asarray(sorted(set(int(d) for d in days)), dtype=np.int64)
    if np.any(days < N_WINDOW):
        raise ValueError("target days must have index >= 7")
    cells = level_cells(levels, data.mask, level)
    if len(cells) == 0 or len(days) == 0:
        return SampleSet(data, np.zeros((0, 2)), np.zeros(0))
    return SampleSet(data, np.repeat(cells, len(days), axis=0), np.tile(days, len(cells)))
