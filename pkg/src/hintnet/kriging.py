"""Ordinary and universal Kriging with an exponential variogram.

Weather channels are interpolated with ordinary Kriging; traffic channels with
universal Kriging (linear drift) under a pluggable distance, by default
Euclidean, optionally shortest path over the road-cell graph.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

MIN_FIT_OBSERVATIONS = 5
REGULARIZATION = 1e-10
ZERO_VARIANCE_SILL = 1e-12

Distance = Callable[[np.ndarray, np.ndarray], np.ndarray]


class TooFewObservations(ValueError):
    pass


@dataclass(frozen=True)
class StationObservation:
    x: float
    y: float
    value: float
    day: int = 0


@dataclass(frozen=True)
class VariogramModel:
    """Exponential variogram ``nugget + (sill - nugget) * (1 - exp(-h / range_km))``
    for h > 0, and 0 at h = 0."""

    nugget: float
    sill: float
    range_km: float

    def __post_init__(self):
        if self.nugget < 0 or not self.sill > self.nugget or not self.range_km > 0:
            raise ValueError(f"invalid variogram parameters {self}")

    def __call__(self, h):
        h = np.asarray(h, dtype=np.float64)
        g = self.nugget + (self.sill - self.nugget) * (1.0 - np.exp(-h / self.range_km))
        return np.where(h > 0, g, 0.0)

    def to_dict(self):
        return {"nugget": self.nugget, "sill": self.sill, "range_km": self.range_km}


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cdist(np.atleast_2d(a), np.atleast_2d(b))


def _as_arrays(obs):
    """Accept StationObservations or an array of (x, y, value[, day]) rows."""
    if len(obs) and isinstance(obs[0], StationObservation):
        arr = np.array([(o.x, o.y, o.value, o.day) for o in obs], dtype=np.float64)
    else:
        arr = np.asarray(obs, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] not in (3, 4):
            raise ValueError("observations must be StationObservations or rows of (x, y, value[, day])")
        if arr.shape[1] == 3:
            arr = np.column_stack([arr, np.zeros(len(arr))])
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("observations contain non-finite values")
    return arr


def merge_duplicates(coords: np.ndarray, values: np.ndarray):
    """Average observations that share identical coordinates."""
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    if len(uniq) == len(coords):
        return coords, values
    inverse = inverse.ravel()
    sums = np.bincount(inverse, weights=values, minlength=len(uniq))
    counts = np.bincount(inverse, minlength=len(uniq))
    return uniq, sums / counts


# ---------------------------------------------------------------------------
# variogram


def empirical_variogram(obs, n_bins: int = 15, distance: Distance = euclidean):
    """Method-of-moments semivariance from pairs observed on the same day.

    Returns ``(bin_centers, semivariance, pair_counts)`` for non-empty bins.
    """
    arr = _as_arrays(obs)
    dists, sq = [], []
    for day in np.unique(arr[:, 3]):
        sub = arr[arr[:, 3] == day]
        if len(sub) < 2:
            continue
        D = distance(sub[:, :2], sub[:, :2])
        iu = np.triu_indices(len(sub), k=1)
        dists.append(D[iu])
        sq.append(0.5 * (sub[:, 2][:, None] - sub[:, 2][None, :])[iu] ** 2)
    if not dists:
        return np.empty(0), np.empty(0), np.empty(0, dtype=np.int64)
    d = np.concatenate(dists)
    s = np.concatenate(sq)
    finite = np.isfinite(d)
    d, s = d[finite], s[finite]
    dmax = d.max() if d.size else 0.0
    if dmax <= 0:
        return np.empty(0), np.empty(0), np.empty(0, dtype=np.int64)
    edges = np.linspace(0.0, dmax, n_bins + 1)
    which = np.clip(np.digitize(d, edges[1:-1]), 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=s, minlength=n_bins)
    keep = counts > 0
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers[keep], sums[keep] / counts[keep], counts[keep]


def _within_day_variance(arr):
    parts = [arr[arr[:, 3] == d, 2] for d in np.unique(arr[:, 3])]
    resid = np.concatenate([p - p.mean() for p in parts])
    return float(np.mean(resid**2)) if resid.size else 0.0


def fit_variogram(obs, n_bins: int = 15, distance: Distance = euclidean) -> VariogramModel:
    """Least-squares exponential fit to the empirical semivariogram.

    Falls back to (nugget 0, sill = sample variance, range = max distance / 4)
    when the fit is degenerate. Raises :class:`TooFewObservations` below five
    observations; callers then fill with a constant.
    """
    arr = _as_arrays(obs)
    if len(arr) < MIN_FIT_OBSERVATIONS:
        raise TooFewObservations(
            f"need at least {MIN_FIT_OBSERVATIONS} observations to fit a variogram, got {len(arr)}; "
            "use a constant fill instead"
        )
    centers, gamma, _ = empirical_variogram(arr, n_bins, distance)
    var = _within_day_variance(arr)
    dmax = float(centers[-1]) if centers.size else 0.0

    def fallback():
        return VariogramModel(0.0, max(var, ZERO_VARIANCE_SILL), dmax / 4.0 if dmax > 0 else 1.0)

    if var <= 0 or centers.size < 3 or not np.any(gamma > 0):
        return fallback()
    scale = float(gamma.max())
    lo_range = float(centers[0])
    hi_range = 10.0 * float(centers[-1])

    def resid(p):
        nug, psill, rng_ = p
        return (nug + psill * (1.0 - np.exp(-centers / rng_)) - gamma) / scale

    x0 = [float(gamma.min()), max(scale - float(gamma.min()), 1e-6 * scale), max(dmax / 4.0, lo_range * 1.01)]
    lower = [0.0, 1e-9 * scale, lo_range]
    upper = [2.0 * scale, 4.0 * scale, hi_range]
    x0 = np.clip(x0, lower, np.nextafter(np.array(upper), 0))
    try:
        res = least_squares(resid, x0, bounds=(lower, upper), method="trf")
    except (ValueError, np.linalg.LinAlgError):
        return fallback()
    nug, psill, rng_ = res.x
    if not (res.success and np.all(np.isfinite(res.x)) and psill > 0):
        return fallback()
    return VariogramModel(float(nug), float(nug + psill), float(rng_))


# ---------------------------------------------------------------------------
# kriging systems


def _solve(K, rhs, n):
    try:
        sol = np.linalg.solve(K, rhs)
        if np.all(np.isfinite(sol)):
            return sol
    except np.linalg.LinAlgError:
        pass
    K = K.copy()
    K[np.arange(n), np.arange(n)] += REGULARIZATION
    try:
        return np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(K, rhs, rcond=None)[0]


def ordinary_weights(coords, model: VariogramModel, targets, distance: Distance = euclidean):
    """Ordinary Kriging weights, one column per target: shape [n, m]."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n = len(coords)
    if n == 1:
        return np.ones((1, len(targets)))
    K = np.ones((n + 1, n + 1))
    K[:n, :n] = model(distance(coords, coords))
    K[n, n] = 0.0
    rhs = np.ones((n + 1, len(targets)))
    rhs[:n] = model(distance(coords, targets))
    return _solve(K, rhs, n)[:n]


def ordinary_krige(obs, model: VariogramModel, targets, distance: Distance = euclidean) -> np.ndarray:
    """Ordinary Kriging predictions at ``targets`` ([m, 2] coordinates)."""
    arr = _as_arrays(obs)
    if len(arr) == 0:
        raise ValueError("ordinary Kriging needs at least one observation")
    coords, values = merge_duplicates(arr[:, :2], arr[:, 2])
    lam = ordinary_weights(coords, model, targets, distance)
    return values @ lam


def _drift(coords):
    return np.column_stack([np.ones(len(coords)), coords[:, 0], coords[:, 1]])


def universal_weights(coords, model: VariogramModel, targets, distance: Distance = euclidean):
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n = len(coords)
    F = _drift(coords)
    K = np.zeros((n + 3, n + 3))
    K[:n, :n] = model(distance(coords, coords))
    K[:n, n:] = F
    K[n:, :n] = F.T
    rhs = np.zeros((n + 3, len(targets)))
    rhs[:n] = model(distance(coords, targets))
    rhs[n:] = _drift(targets).T
    return _solve(K, rhs, n)[:n]


def universal_krige(obs, model: VariogramModel, targets, distance: Distance = euclidean) -> np.ndarray:
    """Universal Kriging with drift basis {1, x, y}.

    Falls back to ordinary Kriging (with a warning) when fewer than four
    distinct stations are available or the drift design is rank deficient.
    """
    arr = _as_arrays(obs)
    if len(arr) == 0:
        raise ValueError("universal Kriging needs at least one observation")
    coords, values = merge_duplicates(arr[:, :2], arr[:, 2])
    if len(coords) < 4 or np.linalg.matrix_rank(_drift(coords)) < 3:
        warnings.warn("drift design is rank deficient; using ordinary Kriging", RuntimeWarning, stacklevel=2)
        return values @ ordinary_weights(coords, model, targets, distance)
    return values @ universal_weights(coords, model, targets, distance)


# ---------------------------------------------------------------------------
# road-network distance


class RoadNetworkDistance:
    """Shortest-path distance over the road-cell graph.

    Edges join 8-neighbour road cells with length ``cell_size_km`` (straight)
    or ``cell_size_km * sqrt(2)`` (diagonal). Points are snapped to their cell,
    or to the nearest road cell when their cell has no road. Two points in the
    same cell are separated by their Euclidean distance.
    """

    def __init__(self, mask: np.ndarray, cell_size_km: float):
        self.mask = np.asarray(mask).astype(bool)
        if not self.mask.any():
            raise ValueError("road mask is empty")
        self.cell_size_km = float(cell_size_km)
        self.cells = np.argwhere(self.mask)
        self.index = -np.ones(self.mask.shape, dtype=np.int64)
        self.index[self.mask] = np.arange(len(self.cells))
        self.graph = self._build_graph()
        self._cache: dict[int, np.ndarray] = {}

    def _build_graph(self):
        rows, cols = self.mask.shape
        src, dst, w = [], [], []
        for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
            r2 = self.cells[:, 0] + dr
            c2 = self.cells[:, 1] + dc
            ok = (r2 >= 0) & (r2 < rows) & (c2 >= 0) & (c2 < cols)
            j = np.full(len(self.cells), -1)
            j[ok] = self.index[r2[ok], c2[ok]]
            keep = j >= 0
            length = self.cell_size_km * (math.sqrt(2.0) if dr and dc else 1.0)
            src.append(np.flatnonzero(keep))
            dst.append(j[keep])
            w.append(np.full(int(keep.sum()), length))
        src, dst, w = map(np.concatenate, (src, dst, w))
        n = len(self.cells)
        return coo_matrix((np.r_[w, w], (np.r_[src, dst], np.r_[dst, src])), shape=(n, n)).tocsr()

    def node_of(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = self.cell_size_km
        row = np.floor(points[:, 1] / d).astype(np.int64)
        col = np.floor(points[:, 0] / d).astype(np.int64)
        rows, cols = self.mask.shape
        inside = (row >= 0) & (row < rows) & (col >= 0) & (col < cols)
        node = np.full(len(points), -1)
        node[inside] = self.index[row[inside], col[inside]]
        missing = node < 0
        if missing.any():
            centers = (self.cells[:, ::-1] + 0.5) * d
            node[missing] = np.argmin(cdist(points[missing], centers), axis=1)
        return node

    def _from(self, node: int) -> np.ndarray:
        if node not in self._cache:
            self._cache[node] = dijkstra(self.graph, directed=False, indices=node)
        return self._cache[node]

    def __call__(self, a, b) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        na, nb = self.node_of(a), self.node_of(b)
        out = np.empty((len(a), len(b)))
        for i, node in enumerate(na):
            out[i] = self._from(int(node))[nb]
        same = na[:, None] == nb[None, :]
        if same.any():
            out[same] = euclidean(a, b)[same]
        return out


# ---------------------------------------------------------------------------
# imputation


def impute_channel(
    observations: Sequence,
    spec,
    kind: str = "weather",
    mask: np.ndarray | None = None,
    model: VariogramModel | None = None,
    distance: Distance | None = None,
    fill_value: float = 0.0,
) -> np.ndarray:
    """Interpolate one station channel onto the grid for every day.

    ``observations[t]`` holds the (x, y, value) rows observed on day t (grid
    km coordinates). Weather uses ordinary Kriging everywhere; traffic uses
    universal Kriging at road cells only, 0 elsewhere. A day without
    observations repeats the previous day's field; the first day uses
    ``fill_value``. Returns an array [rows, cols, num_days].
    """
    if kind not in ("weather", "traffic"):
        raise ValueError(f"kind must be 'weather' or 'traffic', got {kind!r}")
    if kind == "traffic" and mask is None:
        raise ValueError("traffic imputation needs the road mask")
    distance = distance or euclidean
    rows, cols = spec.rows, spec.cols
    xx, yy = spec.cell_centers_km()
    if kind == "traffic":
        sel = np.asarray(mask).astype(bool)
    else:
        sel = np.ones((rows, cols), dtype=bool)
    targets = np.column_stack([xx[sel], yy[sel]])

    days = []
    for t, day_obs in enumerate(observations):
        arr = _as_arrays(day_obs) if len(day_obs) else np.empty((0, 4))
        arr[:, 3] = t
        days.append(arr)
    if model is None:
        pooled = np.concatenate(days) if days else np.empty((0, 4))
        try:
            model = fit_variogram(pooled, distance=distance)
        except TooFewObservations:
            model = None

    out = np.zeros((rows, cols, len(days)))
    prev = np.full(len(targets), float(fill_value))
    for t, arr in enumerate(days):
        if len(arr) == 0:
            vals = prev
        elif len(arr) == 1 or model is None:
            vals = np.full(len(targets), float(arr[:, 2].mean()))
        elif kind == "weather":
            vals = ordinary_krige(arr, model, targets, distance)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                vals = universal_krige(arr, model, targets, distance)
        out[sel, t] = vals
        prev = vals
    return out
