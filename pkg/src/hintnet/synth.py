"""Seeded synthetic world: an urban core, a suburban ring, highway corridors and
a rural section-line road grid, with accidents drawn from a Poisson law whose
rate depends on zone, weekday, season, holidays and wet weather.

The generator writes the same CSV files that ``hintnet ingest`` consumes.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridSpec, RoadSegment, load_holidays, rasterize_roads
from .pipeline import TRAFFIC_CHANNELS, WEATHER_CHANNELS

RURAL, CORRIDOR, SUBURBAN, URBAN = 0, 1, 2, 3


@dataclass
class SynthSpec:
    rows: int = 32
    cols: int = 32
    num_days: int = 1095
    seed: int = 0
    time_start: dt.date = dt.date(2016, 1, 1)
    origin_lat: float = 41.0
    origin_lon: float = -95.5
    cell_size_km: float = 5.0
    urban_centers: tuple = ((16.0, 16.0),)
    urban_radius: float = 4.5
    suburban_radius: float = 9.5
    corridors: tuple = (((0.5, 3.5), (31.5, 28.5)), ((16.5, 0.5), (16.5, 31.5)), ((0.5, 16.5), (31.5, 16.5)))
    rural_road_spacing: int = 4
    rate_rural: float = 0.005
    rate_suburban: float = 0.05
    rate_urban: float = 0.5
    urban_peak: float = 4.0
    wet_multiplier: float = 1.5
    weekday_factors: tuple = (0.9, 0.85, 0.95, 1.1, 1.6, 0.75, 0.55)
    seasonal_amplitude: float = 0.4
    holiday_multiplier: float = 1.3
    p_wet_after_wet: float = 0.8
    p_wet_after_dry: float = 0.1
    n_weather_stations: int = 10
    n_traffic_stations: int = 14
    station_missing_rate: float = 0.03

    def __post_init__(self):
        if isinstance(self.time_start, str):
            self.time_start = dt.date.fromisoformat(self.time_start)
        if min(self.rows, self.cols) < 16:
            raise ValueError("synthetic grid dimensions must be >= 16")
        if not 0 < self.rate_rural < self.rate_suburban < self.rate_urban:
            raise ValueError("rates must satisfy 0 < rural < suburban < urban")
        if len(self.weekday_factors) != 7 or min(self.weekday_factors) <= 0:
            raise ValueError("weekday_factors needs 7 positive values")
        if self.wet_multiplier <= 0 or self.urban_peak < 1:
            raise ValueError("wet_multiplier must be > 0 and urban_peak >= 1")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(
            rows=self.rows,
            cols=self.cols,
            origin_lat=self.origin_lat,
            origin_lon=self.origin_lon,
            time_start=self.time_start,
            num_days=self.num_days,
            cell_size_km=self.cell_size_km,
        )

    def to_dict(self):
        d = asdict(self)
        d["time_start"] = self.time_start.isoformat()
        return d


@dataclass
class SynthWorld:
    spec: SynthSpec
    zones: np.ndarray
    base_rate: np.ndarray
    mask: np.ndarray
    wet: np.ndarray
    day_factor: np.ndarray
    counts: np.ndarray
    files: dict = field(default_factory=dict)

    def rate(self) -> np.ndarray:
        """Expected daily count per cell and day, [rows, cols, days]."""
        return self.base_rate[:, :, None] * self.day_factor[None, None, :]


def _zones(spec: SynthSpec):
    r = np.arange(spec.rows)[:, None] + 0.5
    c = np.arange(spec.cols)[None, :] + 0.5
    dist = np.full((spec.rows, spec.cols), np.inf)
    for cr, cc in spec.urban_centers:
        dist = np.minimum(dist, np.hypot(r - cr, c - cc))
    zones = np.full((spec.rows, spec.cols), RURAL, dtype=np.int64)
    zones[dist <= spec.suburban_radius] = SUBURBAN
    zones[dist <= spec.urban_radius] = URBAN
    return zones, dist


def _roads(spec: SynthSpec, zones):
    """Road segments in grid-cell coordinates (row, col) with attributes."""
    segs = []
    R, C = spec.rows, spec.cols
    for i in range(R):
        cols = np.flatnonzero(zones[i] == URBAN)
        if cols.size:
            segs.append(((i + 0.5, cols[0] + 0.5), (i + 0.5, cols[-1] + 0.5), 35.0, 12000.0, 2))
    for j in range(C):
        rows = np.flatnonzero(zones[:, j] == URBAN)
        if rows.size:
            segs.append(((rows[0] + 0.5, j + 0.5), (rows[-1] + 0.5, j + 0.5), 35.0, 12000.0, 2))
    for i in range(0, R, 2):
        cols = np.flatnonzero(zones[i] == SUBURBAN)
        if cols.size:
            segs.append(((i + 0.5, cols[0] + 0.5), (i + 0.5, cols[-1] + 0.5), 45.0, 6000.0, 2))
    for j in range(0, C, 2):
        rows = np.flatnonzero(zones[:, j] == SUBURBAN)
        if rows.size:
            segs.append(((rows[0] + 0.5, j + 0.5), (rows[-1] + 0.5, j + 0.5), 45.0, 6000.0, 2))
    s = spec.rural_road_spacing
    for i in range(s // 2, R, s):
        segs.append(((i + 0.5, 0.5), (i + 0.5, C - 0.5), 55.0, 800.0, 3))
    for j in range(s // 2, C, s):
        segs.append(((0.5, j + 0.5), (R - 0.5, j + 0.5), 55.0, 800.0, 3))
    for a, b in spec.corridors:
        segs.append((tuple(a), tuple(b), 70.0, 20000.0, 1))
    return segs


def _to_segment(spec: SynthSpec, seg) -> RoadSegment:
    (r1, c1), (r2, c2), speed, aadt, cls = seg
    d = spec.cell_size_km
    lat1, lon1 = spec.grid.to_latlon(c1 * d, r1 * d)
    lat2, lon2 = spec.grid.to_latlon(c2 * d, r2 * d)
    return RoadSegment(float(lat1), float(lon1), float(lat2), float(lon2), speed, aadt, cls)


def _corridor_cells(spec: SynthSpec, segs, n_corridors):
    cells = set()
    for seg in segs[-n_corridors:] if n_corridors else []:
        (r1, c1), (r2, c2) = seg[0], seg[1]
        n = int(4 * max(abs(r2 - r1), abs(c2 - c1))) + 1
        for t in np.linspace(0, 1, n + 1):
            cells.add((int(r1 + t * (r2 - r1)), int(c1 + t * (c2 - c1))))
    return cells


def _wet_days(spec: SynthSpec, rng) -> np.ndarray:
    wet = np.zeros(spec.num_days, dtype=bool)
    for t in range(1, spec.num_days):
        p = spec.p_wet_after_wet if wet[t - 1] else spec.p_wet_after_dry
        wet[t] = rng.random() < p
    return wet


def _day_factor(spec: SynthSpec, wet, holidays) -> np.ndarray:
    out = np.empty(spec.num_days)
    for t in range(spec.num_days):
        d = spec.time_start + dt.timedelta(days=t)
        doy = d.timetuple().tm_yday
        f = spec.weekday_factors[d.weekday()]
        f *= 1.0 + spec.seasonal_amplitude * math.cos(2 * math.pi * (doy - 20) / 365.25)
        if d in holidays:
            f *= spec.holiday_multiplier
        if wet[t]:
            f *= spec.wet_multiplier
        out[t] = f
    return out


def _weather(spec: SynthSpec, rng, wet, sx, sy):
    """Station weather [n_stations, days, 7] in the order of WEATHER_CHANNELS."""
    T = spec.num_days
    doy = np.array([(spec.time_start + dt.timedelta(days=t)).timetuple().tm_yday for t in range(T)])
    season = np.cos(2 * np.pi * (doy - 200) / 365.25)  # +1 mid-July
    width = spec.cols * spec.cell_size_km
    gradient = 1.0 + 0.4 * (sx / width)[:, None]
    amount = rng.gamma(2.0, 4.0, size=T) * wet
    precip = amount[None, :] * gradient * rng.uniform(0.7, 1.3, size=(len(sx), T))
    tmean = 10.0 + 15.0 * season[None, :] - 0.05 * (sy[:, None] - sy.mean()) + rng.normal(0, 2.0, (len(sx), T))
    spread = rng.uniform(6.0, 12.0, size=(len(sx), T))
    tmin, tmax = tmean - spread / 2, tmean + spread / 2
    snowfall = np.where(tmean < 0, precip * 1.2, 0.0)
    depth = np.zeros_like(snowfall)
    for t in range(T):
        prev = depth[:, t - 1] if t else 0.0
        melt = np.clip(tmax[:, t], 0, None) * 0.8
        depth[:, t] = np.clip(prev + snowfall[:, t] - melt, 0, None)
    wind = np.abs(rng.normal(15.0, 5.0, (len(sx), T))) + 8.0 * wet[None, :]
    vis = np.clip(16.0 - 0.6 * precip + rng.normal(0, 1.0, (len(sx), T)), 0.2, 16.0)
    return np.stack([precip, snowfall, depth, tmin, tmax, wind, vis], axis=-1)


def _traffic(spec: SynthSpec, rng, wet, station_zone, day_factor):
    T = spec.num_days
    base_speed = np.array([60.0, 65.0, 45.0, 32.0])[station_zone]
    base_vol = np.array([900.0, 18000.0, 6000.0, 12000.0])[station_zone]
    weekday = np.array([(spec.time_start + dt.timedelta(days=t)).weekday() for t in range(T)])
    vol_factor = np.where(weekday >= 5, 0.75, 1.0)
    speed = base_speed[:, None] * (1 - 0.12 * wet[None, :]) + rng.normal(0, 2.0, (len(station_zone), T))
    volume = base_vol[:, None] * vol_factor[None, :] * rng.lognormal(0, 0.08, (len(station_zone), T))
    trucks = volume * np.where(station_zone == CORRIDOR, 0.25, 0.08)[:, None] * rng.lognormal(0, 0.1, volume.shape)
    return np.stack([speed, volume, trucks], axis=-1)


def generate(spec: SynthSpec, out_dir: str | Path | None = None) -> SynthWorld:
    """Build the world and, when ``out_dir`` is given, write accidents.csv,
    roads.csv, poi.csv, stations.csv, holidays.txt and world.json there."""
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    zones, dist = _zones(spec)
    segs = _roads(spec, zones)
    road_segments = [_to_segment(spec, s) for s in segs]
    mask, _ = rasterize_roads(road_segments, grid)
    corridor = _corridor_cells(spec, segs, len(spec.corridors))
    for r, c in corridor:
        if 0 <= r < spec.rows and 0 <= c < spec.cols and zones[r, c] == RURAL and mask[r, c]:
            zones[r, c] = CORRIDOR

    base = np.select(
        [zones == URBAN, zones == SUBURBAN, zones == CORRIDOR],
        [
            spec.rate_urban * (1 + (spec.urban_peak - 1) * np.clip(1 - dist / spec.urban_radius, 0, 1)),
            np.full(zones.shape, spec.rate_suburban),
            np.full(zones.shape, spec.rate_suburban),
        ],
        spec.rate_rural,
    )
    base = np.where(mask > 0, base, 0.0)

    holidays = load_holidays()
    wet = _wet_days(spec, rng)
    day_factor = _day_factor(spec, wet, holidays)
    counts = rng.poisson(base[:, :, None] * day_factor[None, None, :])

    world = SynthWorld(spec, zones, base, mask, wet, day_factor, counts)
    if out_dir is None:
        return world

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = spec.cell_size_km
    dates = grid.dates()

    with open(out / "accidents.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "lat", "lon"])
        for r, c, t in np.argwhere(counts > 0):
            for _ in range(counts[r, c, t]):
                fx, fy = rng.uniform(0.05, 0.95, size=2)
                lat, lon = grid.to_latlon((c + fx) * d, (r + fy) * d)
                sec = int(rng.integers(0, 86400))
                ts = dt.datetime.combine(dates[t], dt.time()) + dt.timedelta(seconds=sec)
                w.writerow([ts.isoformat(), f"{lat:.7f}", f"{lon:.7f}"])

    with open(out / "roads.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat1", "lon1", "lat2", "lon2", "speed_limit", "aadt", "road_class"])
        for s in road_segments:
            w.writerow([f"{s.lat1:.7f}", f"{s.lon1:.7f}", f"{s.lat2:.7f}", f"{s.lon2:.7f}", s.speed_limit, s.aadt, s.road_class])

    poi_mean = np.array([0.3, 1.0, 3.0, 8.0])[zones] * (mask > 0)
    with open(out / "poi.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon", "category"])
        n_poi = rng.poisson(poi_mean)
        for r, c in np.argwhere(n_poi > 0):
            for _ in range(n_poi[r, c]):
                fx, fy = rng.uniform(0.05, 0.95, size=2)
                lat, lon = grid.to_latlon((c + fx) * d, (r + fy) * d)
                cat = int(rng.integers(1, 14))
                w.writerow([f"{lat:.7f}", f"{lon:.7f}", cat])

    W = spec.cols * d
    H = spec.rows * d
    sx = rng.uniform(0.05 * W, 0.95 * W, spec.n_weather_stations)
    sy = rng.uniform(0.05 * H, 0.95 * H, spec.n_weather_stations)
    weather = _weather(spec, rng, wet, sx, sy)
    road_cells = np.argwhere(mask > 0)
    pick = rng.choice(len(road_cells), size=min(spec.n_traffic_stations, len(road_cells)), replace=False)
    tcells = road_cells[np.sort(pick)]
    tx = (tcells[:, 1] + 0.5) * d
    ty = (tcells[:, 0] + 0.5) * d
    traffic = _traffic(spec, rng, wet, zones[tcells[:, 0], tcells[:, 1]], day_factor)

    with open(out / "stations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "lat", "lon", "date", "channel", "value"])
        groups = [("W", sx, sy, weather, WEATHER_CHANNELS), ("T", tx, ty, traffic, TRAFFIC_CHANNELS)]
        for prefix, xs, ys, values, names in groups:
            lat, lon = grid.to_latlon(xs, ys)
            missing = rng.random(values.shape[:2]) < spec.station_missing_rate
            for t in range(spec.num_days):
                for s in range(len(xs)):
                    if missing[s, t]:
                        continue
                    for k, name in enumerate(names):
                        w.writerow(
                            [f"{prefix}{s:02d}", f"{lat[s]:.7f}", f"{lon[s]:.7f}", dates[t].isoformat(), name, f"{values[s, t, k]:.4f}"]
                        )

    (out / "holidays.txt").write_text("".join(f"{h.isoformat()}\n" for h in sorted(holidays)))
    (out / "world.json").write_text(
        json.dumps(
            {
                "spec": spec.to_dict(),
                "zones": zones.tolist(),
                "base_rate": np.round(base, 10).tolist(),
                "wet_days": wet.astype(int).tolist(),
                "total_events": int(counts.sum()),
            },
            sort_keys=True,
        )
    )
    world.files = {k: str(out / f) for k, f in [
        ("accidents", "accidents.csv"), ("roads", "roads.csv"), ("poi", "poi.csv"),
        ("stations", "stations.csv"), ("holidays", "holidays.txt"), ("world", "world.json"),
    ]}
    return world
