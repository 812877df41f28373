"""w x w sub-region windows and their accident-correlation adjacency."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CACHE_VERSION = 1


@dataclass
class AdjacencyMatrix:
    matrix: np.ndarray
    row_normalized: bool


def extract_window(tensor: np.ndarray, center: tuple[int, int], w: int) -> np.ndarray:
    """w x w slice of ``tensor`` (leading axes rows, cols) centred on a cell,
    zero-filled outside the grid."""
    if w % 2 == 0 or w < 1:
        raise ValueError(f"window size must be a positive odd number, got {w}")
    tensor = np.asarray(tensor)
    r, c = center
    rows, cols = tensor.shape[:2]
    half = w // 2
    out = np.zeros((w, w) + tensor.shape[2:], dtype=tensor.dtype)
    r0, r1 = max(r - half, 0), min(r + half + 1, rows)
    c0, c1 = max(c - half, 0), min(c + half + 1, cols)
    if r0 < r1 and c0 < c1:
        out[r0 - (r - half) : r1 - (r - half), c0 - (c - half) : c1 - (c - half)] = tensor[r0:r1, c0:c1]
    return out


def pearson_matrix(series: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlation of the rows of ``series`` [n_cells, n_days].

    Any pair involving a zero-variance series gets 0, and the diagonal is 1.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2 or series.shape[1] < 2:
        raise ValueError("need at least two days of training counts per cell")
    dev = series - series.mean(axis=1, keepdims=True)
    ss = np.einsum("ij,ij->i", dev, dev)
    ok = ss > 0
    norm = np.sqrt(np.where(ok, ss, 1.0))
    a = (dev @ dev.T) / np.outer(norm, norm)
    a[~ok, :] = 0.0
    a[:, ~ok] = 0.0
    np.clip(a, -1.0, 1.0, out=a)
    np.fill_diagonal(a, 1.0)
    return a


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Clamp negative correlations to 0 and divide each row by its sum."""
    a = np.maximum(np.asarray(a, dtype=np.float64), 0.0)
    return a / a.sum(axis=-1, keepdims=True)


def pearson_adjacency(series: np.ndarray, normalize: bool = True) -> AdjacencyMatrix:
    a = pearson_matrix(series)
    if normalize:
        return AdjacencyMatrix(normalize_adjacency(a), True)
    return AdjacencyMatrix(a, False)


def window_series(counts: np.ndarray, center: tuple[int, int], w: int, days) -> np.ndarray:
    """Training-day count series of the w^2 window cells, row-major: [w^2, len(days)]."""
    win = extract_window(np.asarray(counts)[:, :, days], center, w)
    return win.reshape(w * w, -1)


class AdjacencyCache:
    """One normalized adjacency per centre cell, built from training days only."""

    def __init__(self, counts: np.ndarray, train_days, w: int):
        self.w = int(w)
        self.train_days = np.asarray(sorted(train_days), dtype=np.int64)
        self.grid_shape = tuple(counts.shape[:2])
        half = self.w // 2
        self._padded = np.pad(
            np.asarray(counts, dtype=np.float64)[:, :, self.train_days], ((half, half), (half, half), (0, 0))
        )
        self._store: dict[tuple[int, int], np.ndarray] = {}

    def __getitem__(self, center) -> np.ndarray:
        key = (int(center[0]), int(center[1]))
        if key not in self._store:
            r, c = key
            win = self._padded[r : r + self.w, c : c + self.w]
            self._store[key] = normalize_adjacency(pearson_matrix(win.reshape(self.w * self.w, -1)))
        return self._store[key]

    def precompute(self, cells) -> None:
        for cell in cells:
            self[cell]

    def stack(self, cells) -> np.ndarray:
        return np.stack([self[c] for c in cells]) if len(cells) else np.zeros((0, self.w**2, self.w**2))

    def header(self) -> dict:
        return {
            "version": CACHE_VERSION,
            "w": self.w,
            "rows": self.grid_shape[0],
            "cols": self.grid_shape[1],
            "train_first": int(self.train_days[0]),
            "train_last": int(self.train_days[-1]),
            "train_count": int(len(self.train_days)),
        }

    def save(self, path: str | Path) -> None:
        keys = sorted(self._store)
        np.savez_compressed(
            path,
            header=np.array(list(self.header().items()), dtype=object),
            centers=np.array(keys, dtype=np.int64).reshape(-1, 2),
            matrices=self.stack(keys),
        )

    def load(self, path: str | Path) -> int:
        """Fill the cache from a file written by :meth:`save`; the header must match."""
        data = np.load(path, allow_pickle=True)
        header = {k: int(v) for k, v in data["header"]}
        if header != self.header():
            raise ValueError(f"adjacency cache header {header} does not match {self.header()}")
        for (r, c), m in zip(data["centers"], data["matrices"]):
            self._store[(int(r), int(c))] = m
        return len(data["centers"])
