"""Spatio-temporal grid: gridding of events, roads and POIs, calendar and
road-network spectral features, and the CSV readers for the raw inputs."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

KM_PER_DEGREE = math.pi * 6371.0088 / 180.0
N_TEMPORAL = 5
N_POI_CATEGORIES = 13
N_ROAD_CLASSES = 3

TEMPORAL_NAMES = ("day_of_week", "day_of_year", "month", "is_weekend", "is_holiday")
ROAD_NAMES = ("road_mask", "speed_limit", "aadt", "road_class_1", "road_class_2", "road_class_3")
POI_NAMES = tuple(f"poi_{c}" for c in range(1, N_POI_CATEGORIES + 1))


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    origin_lat: float
    origin_lon: float
    time_start: dt.date
    num_days: int
    cell_size_km: float = 5.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must have at least one row and column, got {self.rows}x{self.cols}")
        if not self.cell_size_km > 0:
            raise ValueError("cell_size_km must be positive")
        if self.num_days < 8:
            raise ValueError("num_days must be >= 8 (7-day window plus a target day)")
        if isinstance(self.time_start, str):
            object.__setattr__(self, "time_start", dt.date.fromisoformat(self.time_start))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def _lon_scale(self) -> float:
        return KM_PER_DEGREE * math.cos(math.radians(self.origin_lat))

    def to_km(self, lat, lon):
        """Equirectangular projection about the grid origin; x east, y north."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        x = (lon - self.origin_lon) * self._lon_scale
        y = (lat - self.origin_lat) * KM_PER_DEGREE
        return x, y

    def to_latlon(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return self.origin_lat + y / KM_PER_DEGREE, self.origin_lon + x / self._lon_scale

    def cell_of_km(self, x, y):
        """Half-open cell indices (row from y, col from x) and an in-bounds flag."""
        row = np.floor(np.asarray(y) / self.cell_size_km).astype(np.int64)
        col = np.floor(np.asarray(x) / self.cell_size_km).astype(np.int64)
        inside = (row >= 0) & (row < self.rows) & (col >= 0) & (col < self.cols)
        return row, col, inside

    def cell_of(self, lat, lon):
        return self.cell_of_km(*self.to_km(lat, lon))

    def cell_centers_km(self):
        """Cell-center coordinates as two [rows, cols] arrays (x, y)."""
        d = self.cell_size_km
        y = (np.arange(self.rows) + 0.5) * d
        x = (np.arange(self.cols) + 0.5) * d
        yy, xx = np.meshgrid(y, x, indexing="ij")
        return xx, yy

    def cell_polygon(self, row: int, col: int):
        """Closed lon/lat ring of a cell, counter-clockwise."""
        d = self.cell_size_km
        xs = [col * d, (col + 1) * d, (col + 1) * d, col * d, col * d]
        ys = [row * d, row * d, (row + 1) * d, (row + 1) * d, row * d]
        lat, lon = self.to_latlon(xs, ys)
        return [[float(a), float(b)] for a, b in zip(lon, lat)]

    def day_index(self, when) -> int:
        if isinstance(when, dt.datetime):
            when = when.date()
        return (when - self.time_start).days

    def dates(self) -> list[dt.date]:
        return [self.time_start + dt.timedelta(days=i) for i in range(self.num_days)]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "origin_lat": self.origin_lat,
            "origin_lon": self.origin_lon,
            "time_start": self.time_start.isoformat(),
            "num_days": self.num_days,
            "cell_size_km": self.cell_size_km,
        }


@dataclass(frozen=True)
class EventRecord:
    timestamp: dt.datetime
    lat: float
    lon: float


@dataclass
class GriddingResult:
    """Output of a gridding pass with the count of records that were skipped."""

    values: np.ndarray
    skipped: int = 0


@dataclass
class RoadSegment:
    lat1: float
    lon1: float
    lat2: float
    lon2: float
    speed_limit: float = 0.0
    aadt: float = 0.0
    road_class: int = 1


@dataclass
class FeatureSet:
    spatial: np.ndarray  # [rows, cols, n_s]
    temporal: np.ndarray  # [num_days, n_t]
    st: np.ndarray  # [rows, cols, num_days, n_st]
    spatial_names: list[str]
    temporal_names: list[str]
    st_names: list[str]
    binary_spatial: list[str] = field(default_factory=list)
    binary_temporal: list[str] = field(default_factory=lambda: ["is_weekend", "is_holiday"])
    binary_st: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.temporal.shape[1] != len(self.temporal_names):
            raise ValueError("temporal names do not match channel count")
        if self.spatial.shape[-1] != len(self.spatial_names) or self.st.shape[-1] != len(self.st_names):
            raise ValueError("feature names do not match channel counts")

    def all_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.spatial)) and np.all(np.isfinite(self.temporal)) and np.all(np.isfinite(self.st))
        )


# ---------------------------------------------------------------------------
# gridding


def map_events_to_grid(events: Iterable[EventRecord], spec: GridSpec) -> GriddingResult:
    """Count events per (row, col, day).

    Records outside the grid or the time range are skipped and counted in
    ``result.skipped``; non-finite coordinates raise ``ValueError``.
    """
    events = list(events)
    counts = np.zeros((spec.rows, spec.cols, spec.num_days), dtype=np.int64)
    if not events:
        return GriddingResult(counts, 0)
    lat = np.array([e.lat for e in events], dtype=np.float64)
    lon = np.array([e.lon for e in events], dtype=np.float64)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        bad = int(np.count_nonzero(~(np.isfinite(lat) & np.isfinite(lon))))
        raise ValueError(f"{bad} event(s) with non-finite coordinates")
    day = np.array([spec.day_index(e.timestamp) for e in events], dtype=np.int64)
    row, col, inside = spec.cell_of(lat, lon)
    ok = inside & (day >= 0) & (day < spec.num_days)
    np.add.at(counts, (row[ok], col[ok], day[ok]), 1)
    skipped = int(len(events) - np.count_nonzero(ok))
    if skipped:
        log.info("skipped %d event(s) outside the grid or time range", skipped)
    return GriddingResult(counts, skipped)


def _segment_cells(spec: GridSpec, seg: RoadSegment) -> set[tuple[int, int]]:
    x1, y1 = spec.to_km(seg.lat1, seg.lon1)
    x2, y2 = spec.to_km(seg.lat2, seg.lon2)
    length = float(np.hypot(x2 - x1, y2 - y1))
    step = spec.cell_size_km / 4.0
    n = max(1, int(math.ceil(length / step)))
    t = np.linspace(0.0, 1.0, n + 1)
    row, col, inside = spec.cell_of_km(x1 + t * (x2 - x1), y1 + t * (y2 - y1))
    return set(zip(row[inside].tolist(), col[inside].tolist()))


def rasterize_roads(segments: Sequence[RoadSegment], spec: GridSpec):
    """Road mask plus per-cell road attributes.

    A segment marks every cell hit when stepping along it at a quarter of the
    cell size. Attribute channels (speed limit, AADT, one-hot road class) hold
    the mean over the segments touching a cell and are 0 off-road.

    Returns ``(mask, attributes)`` with ``attributes`` of shape
    [rows, cols, 6] ordered as ``ROAD_NAMES``.
    """
    mask = np.zeros(spec.shape, dtype=np.int8)
    sums = np.zeros(spec.shape + (5,), dtype=np.float64)
    hits = np.zeros(spec.shape, dtype=np.int64)
    for seg in segments:
        coords = (seg.lat1, seg.lon1, seg.lat2, seg.lon2)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"road segment with non-finite endpoint: {coords}")
        if not 1 <= int(seg.road_class) <= N_ROAD_CLASSES:
            raise ValueError(f"road_class must be in 1..{N_ROAD_CLASSES}, got {seg.road_class}")
        attrs = np.zeros(5)
        attrs[0] = seg.speed_limit
        attrs[1] = seg.aadt
        attrs[1 + int(seg.road_class)] = 1.0
        for r, c in _segment_cells(spec, seg):
            mask[r, c] = 1
            sums[r, c] += attrs
            hits[r, c] += 1
    means = np.divide(sums, hits[..., None], out=np.zeros_like(sums), where=hits[..., None] > 0)
    attributes = np.concatenate([mask[..., None].astype(np.float64), means], axis=-1)
    return mask, attributes


def map_poi(points: Iterable[tuple[float, float, int]], spec: GridSpec) -> GriddingResult:
    """Per-cell frequency of each POI category; values are [rows, cols, 13]."""
    out = np.zeros(spec.shape + (N_POI_CATEGORIES,), dtype=np.float64)
    points = list(points)
    if not points:
        return GriddingResult(out, 0)
    arr = np.asarray(points, dtype=np.float64)
    cat = arr[:, 2].astype(np.int64)
    if np.any((cat < 1) | (cat > N_POI_CATEGORIES)) or np.any(arr[:, 2] != cat):
        raise ValueError(f"POI category must be an integer in 1..{N_POI_CATEGORIES}")
    finite = np.isfinite(arr[:, 0]) & np.isfinite(arr[:, 1])
    row, col, inside = spec.cell_of(np.where(finite, arr[:, 0], np.nan), np.where(finite, arr[:, 1], np.nan))
    ok = inside & finite
    np.add.at(out, (row[ok], col[ok], cat[ok] - 1), 1.0)
    return GriddingResult(out, int(len(points) - np.count_nonzero(ok)))


# ---------------------------------------------------------------------------
# temporal features


def load_holidays(path: str | Path | None = None) -> set[dt.date]:
    """Read one ISO date per line; ``None`` loads the bundled US federal list."""
    if path is None:
        text = resources.files("hintnet.data").joinpath("us_federal_holidays.txt").read_text()
    else:
        text = Path(path).read_text()
    out = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.add(dt.date.fromisoformat(line))
    return out


def calendar_features(date: dt.date, holidays: Iterable[dt.date] = ()) -> np.ndarray:
    """(day_of_week Mon=0, day_of_year, month, is_weekend, is_holiday)."""
    if isinstance(date, dt.datetime):
        date = date.date()
    holidays = holidays if isinstance(holidays, (set, frozenset)) else set(holidays)
    dow = date.weekday()
    return np.array(
        [dow, date.timetuple().tm_yday, date.month, float(dow >= 5), float(date in holidays)],
        dtype=np.float64,
    )


def temporal_matrix(spec: GridSpec, holidays: Iterable[dt.date] = ()) -> np.ndarray:
    holidays = set(holidays)
    return np.stack([calendar_features(d, holidays) for d in spec.dates()])


# ---------------------------------------------------------------------------
# spectral features


def road_graph_laplacian(mask: np.ndarray):
    """Unnormalized Laplacian of the 8-neighbour graph over road cells.

    Returns ``(L, cells)`` where ``cells`` lists (row, col) in row-major order.
    """
    mask = np.asarray(mask).astype(bool)
    cells = np.argwhere(mask)
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(len(cells))
    n = len(cells)
    adj = np.zeros((n, n))
    rows, cols = mask.shape
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            r2 = cells[:, 0] + dr
            c2 = cells[:, 1] + dc
            ok = (r2 >= 0) & (r2 < rows) & (c2 >= 0) & (c2 < cols)
            j = np.full(n, -1)
            j[ok] = index[r2[ok], c2[ok]]
            keep = j >= 0
            adj[np.arange(n)[keep], j[keep]] = 1.0
    L = np.diag(adj.sum(axis=1)) - adj
    return L, [tuple(c) for c in cells.tolist()]


def fix_sign(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Flip ``v`` so its largest-magnitude entry (first one on ties) is positive."""
    mags = np.abs(v)
    k = int(np.argmax(mags >= mags.max() - tol))
    return -v if v[k] < 0 else v


def spectral_features(mask: np.ndarray, n_spec: int = 10, zero_tol: float = 1e-8) -> np.ndarray:
    """Laplacian-eigenvector embedding of the road network.

    Each road cell gets its entries in the ``n_spec`` eigenvectors with the
    smallest nonzero eigenvalues; off-road cells are 0. Missing channels (too
    few road cells or too many components) are zero-padded with a warning.
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("road mask is empty; spectral features need at least one road cell")
    L, cells = road_graph_laplacian(mask)
    vals, vecs = np.linalg.eigh(L)
    nonzero = np.flatnonzero(vals > zero_tol * max(1.0, vals[-1]))
    chosen = nonzero[:n_spec]
    if len(chosen) < n_spec:
        warnings.warn(
            f"road graph yields only {len(chosen)} nonzero-eigenvalue vectors; padding to {n_spec}",
            RuntimeWarning,
            stacklevel=2,
        )
    out = np.zeros(mask.shape + (n_spec,))
    rc = np.array(cells)
    for k, j in enumerate(chosen):
        out[rc[:, 0], rc[:, 1], k] = fix_sign(vecs[:, j])
    return out


# ---------------------------------------------------------------------------
# CSV readers


def _open_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def _parse_timestamp(text: str) -> dt.datetime:
    text = text.strip()
    if len(text) == 10:
        return dt.datetime.combine(dt.date.fromisoformat(text), dt.time())
    return dt.datetime.fromisoformat(text.replace("Z", "+00:00"))


def read_accidents(path) -> list[EventRecord]:
    out = []
    for lineno, row in _open_rows(path):
        try:
            out.append(EventRecord(_parse_timestamp(row["timestamp"]), float(row["lat"]), float(row["lon"])))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad accident record ({exc})") from exc
    return out


def read_roads(path) -> list[RoadSegment]:
    out = []
    for lineno, row in _open_rows(path):
        try:
            out.append(
                RoadSegment(
                    float(row["lat1"]),
                    float(row["lon1"]),
                    float(row["lat2"]),
                    float(row["lon2"]),
                    float(row["speed_limit"]),
                    float(row["aadt"]),
                    int(row["road_class"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad road record ({exc})") from exc
    return out


def read_poi(path) -> list[tuple[float, float, int]]:
    out = []
    for lineno, row in _open_rows(path):
        try:
            out.append((float(row["lat"]), float(row["lon"]), int(row["category"])))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad POI record ({exc})") from exc
    return out
