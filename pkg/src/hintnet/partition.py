"""Risk-based spatial partitioning of an accident-count raster.

RSP is a DBSCAN-style region growing on grid cells: a cell is high-risk when
its count exceeds ``min_points`` (and reaches ``min_risk``), critical when more
than ``min_neighbors`` high-risk cells lie in its (2 eps + 1)^2 block, border
when it is not critical but sees a critical cell, and an outlier otherwise.
M-RSP repeats RSP with ``min_neighbors`` = 0, 1, ..., (2 eps + 1)^2 and peels
off low-risk regions level by level.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

OUTLIER, BORDER, CRITICAL = 0, 1, 2


@dataclass(frozen=True)
class RSPParams:
    eps: int = 1
    min_points: float = 0.0
    min_risk: float = 0.0
    min_neighbors: int = 0

    def __post_init__(self):
        if self.eps < 1:
            raise ValueError("eps must be >= 1")
        if self.min_points < 0 or self.min_risk < 0:
            raise ValueError("min_points and min_risk must be >= 0")
        if not 0 <= self.min_neighbors <= (2 * self.eps + 1) ** 2:
            raise ValueError(f"min_neighbors must lie in [0, {(2 * self.eps + 1) ** 2}]")


@dataclass(frozen=True)
class MRSPParams:
    eta: float
    eps: int = 1
    min_points: float = 0.0
    min_risk: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        RSPParams(self.eps, self.min_points, self.min_risk, 0)

    @property
    def iterations(self) -> int:
        return (2 * self.eps + 1) ** 2

    def rsp(self, min_neighbors: int) -> RSPParams:
        return RSPParams(self.eps, self.min_points, self.min_risk, min_neighbors)


def _block_sum(a: np.ndarray, eps: int) -> np.ndarray:
    """Sum over the (2 eps + 1)^2 block around each cell, zero outside the grid."""
    p = np.pad(a.astype(np.int64), eps)
    c = np.zeros((p.shape[0] + 1, p.shape[1] + 1), dtype=np.int64)
    c[1:, 1:] = p.cumsum(0).cumsum(1)
    k = 2 * eps + 1
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def high_risk(counts: np.ndarray, params: RSPParams) -> np.ndarray:
    counts = np.asarray(counts)
    return (counts > params.min_points) & (counts >= params.min_risk)


def classify_cells(counts: np.ndarray, params: RSPParams) -> np.ndarray:
    """Cell classes: ``CRITICAL`` (2), ``BORDER`` (1) or ``OUTLIER`` (0)."""
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    n_high = _block_sum(high_risk(counts, params), params.eps)
    critical = n_high > params.min_neighbors
    sees_critical = _block_sum(critical, params.eps) > 0
    out = np.full(counts.shape, OUTLIER, dtype=np.int8)
    out[sees_critical] = BORDER
    out[critical] = CRITICAL
    return out


def rsp(counts: np.ndarray, params: RSPParams) -> np.ndarray:
    """Region labels (0 = outlier, 1.. = region id) by row-major region growing.

    Regions expand only through critical cells; a border cell reachable from
    two regions keeps the id of the region that reached it first.
    """
    classes = classify_cells(counts, params)
    rows, cols = classes.shape
    eps = params.eps
    labels = np.zeros((rows, cols), dtype=np.int64)
    next_id = 1
    for r0 in range(rows):
        for c0 in range(cols):
            if classes[r0, c0] != CRITICAL or labels[r0, c0]:
                continue
            labels[r0, c0] = next_id
            queue = deque([(r0, c0)])
            while queue:
                r, c = queue.popleft()
                for rr in range(max(r - eps, 0), min(r + eps + 1, rows)):
                    for cc in range(max(c - eps, 0), min(c + eps + 1, cols)):
                        if labels[rr, cc] or classes[rr, cc] == OUTLIER:
                            continue
                        labels[rr, cc] = next_id
                        if classes[rr, cc] == CRITICAL:
                            queue.append((rr, cc))
            next_id += 1
    return labels


def count_accidents(cells, counts: np.ndarray) -> float:
    """Total count over a region given as a boolean mask or (row, col) pairs."""
    counts = np.asarray(counts)
    cells = np.asarray(cells)
    if cells.dtype == bool:
        return counts[cells].sum()
    if cells.size == 0:
        return 0
    cells = cells.reshape(-1, 2)
    return counts[cells[:, 0], cells[:, 1]].sum()


def m_rsp(counts: np.ndarray, mask: np.ndarray | None, params: MRSPParams) -> np.ndarray:
    """Multi-level partitioning; returns the level of every cell (0 = no risk).

    ``counts`` must be aggregated over the training period only. Cells without
    road (``mask == 0``) are forced to level 0.
    """
    counts = np.asarray(counts)
    if counts.ndim != 2:
        raise ValueError("counts must be a 2-D matrix aggregated over time")
    iters = params.iterations
    result = np.full(counts.shape, -1, dtype=np.int64)
    assigned = np.zeros(counts.shape, dtype=bool)
    for beta in range(iters + 1):
        labels = rsp(counts, params.rsp(beta))
        eta = math.inf if beta == iters else params.eta
        noise = (labels == 0) & ~assigned
        result[noise] = beta - 1
        assigned |= noise
        for region in range(1, labels.max() + 1):
            cells = labels == region
            if count_accidents(cells, counts) <= eta:
                fresh = cells & ~assigned
                result[fresh] = beta
                assigned |= fresh
    result += 1
    if mask is not None:
        result[np.asarray(mask) == 0] = 0
    return result


def aggregate_levels(levels: np.ndarray, k: int) -> np.ndarray:
    """Merge every ``k`` consecutive nonzero levels: level -> ceil(level / k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    levels = np.asarray(levels, dtype=np.int64)
    return np.where(levels > 0, -(-levels // k), 0)
