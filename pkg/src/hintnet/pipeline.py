"""Ingestion: raw CSV files to gridded counts, road mask and the three feature
tensors, plus the on-disk dataset bundle shared by the CLI stages."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import (
    POI_NAMES,
    ROAD_NAMES,
    TEMPORAL_NAMES,
    FeatureSet,
    GridSpec,
    load_holidays,
    map_events_to_grid,
    map_poi,
    rasterize_roads,
    read_accidents,
    read_poi,
    read_roads,
    spectral_features,
    temporal_matrix,
)
from .kriging import RoadNetworkDistance, impute_channel

log = logging.getLogger(__name__)

WEATHER_CHANNELS = ("precipitation", "snowfall", "snow_depth", "temp_min", "temp_max", "wind", "visibility")
TRAFFIC_CHANNELS = ("speed", "volume", "truck_volume")
ACCIDENT_CHANNELS = ("accident_count", "accident_mean_28d", "accident_mean_365d")
DATASET_VERSION = 1


@dataclass
class Dataset:
    spec: GridSpec
    counts: np.ndarray  # [rows, cols, days] int
    mask: np.ndarray  # [rows, cols] int8
    features: FeatureSet
    skipped: dict = field(default_factory=dict)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        f = self.features
        header = {
            "version": DATASET_VERSION,
            "grid": self.spec.to_dict(),
            "spatial_names": list(f.spatial_names),
            "temporal_names": list(f.temporal_names),
            "st_names": list(f.st_names),
            "binary_spatial": list(f.binary_spatial),
            "binary_temporal": list(f.binary_temporal),
            "binary_st": list(f.binary_st),
            "skipped": self.skipped,
            "meta": meta or {},
        }
        with open(path, "wb") as fh:
            np.savez_compressed(
                fh,
                header=np.array(json.dumps(header, sort_keys=True)),
                counts=self.counts,
                mask=self.mask,
                spatial=f.spatial,
                temporal=f.temporal,
                st=f.st,
            )

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with np.load(path) as z:
            header = json.loads(str(z["header"]))
            if header.get("version") != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {header.get('version')}")
            features = FeatureSet(
                spatial=z["spatial"],
                temporal=z["temporal"],
                st=z["st"],
                spatial_names=header["spatial_names"],
                temporal_names=header["temporal_names"],
                st_names=header["st_names"],
                binary_spatial=header["binary_spatial"],
                binary_temporal=header["binary_temporal"],
                binary_st=header["binary_st"],
            )
            ds = cls(GridSpec(**header["grid"]), z["counts"], z["mask"], features, header["skipped"])
        ds.meta = header["meta"]
        return ds


def read_stations(path, spec: GridSpec):
    """Long-format station file to ``{channel: [day -> array of (x, y, value)]}``.

    Rows outside the time range are skipped and counted; duplicate readings of
    one station, channel and day keep the last value.
    """
    readings: dict[str, dict[tuple[str, int], tuple[float, float, float]]] = defaultdict(dict)
    skipped = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"station_id", "lat", "lon", "date", "channel", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for line, row in enumerate(reader, start=2):
            try:
                t = spec.day_index(dt.date.fromisoformat(row["date"][:10]))
                lat, lon, value = float(row["lat"]), float(row["lon"]), float(row["value"])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            if not np.isfinite([lat, lon, value]).all():
                raise ValueError(f"{path}:{line}: non-finite value")
            if not 0 <= t < spec.num_days:
                skipped += 1
                continue
            x, y = spec.to_km(lat, lon)
            readings[row["channel"]][(row["station_id"], t)] = (float(x), float(y), value)
    out = {}
    for channel, rows in readings.items():
        per_day = [[] for _ in range(spec.num_days)]
        for (_, t), obs in sorted(rows.items()):
            per_day[t].append(obs)
        out[channel] = [np.array(d, dtype=np.float64).reshape(-1, 3) for d in per_day]
    return out, skipped


def accident_channels(counts: np.ndarray) -> np.ndarray:
    """Daily count plus trailing 28- and 365-day means (inclusive of the day,
    shorter at the start of the record): [rows, cols, days, 3]."""
    counts = np.asarray(counts, dtype=np.float64)
    c = np.concatenate([np.zeros(counts.shape[:2] + (1,)), counts.cumsum(axis=2)], axis=2)
    T = counts.shape[2]
    t = np.arange(T)
    out = [counts]
    for span in (28, 365):
        lo = np.maximum(t + 1 - span, 0)
        out.append((c[:, :, t + 1] - c[:, :, lo]) / (t + 1 - lo))
    return np.stack(out, axis=-1)


def _training_mean(per_day, train_days) -> float:
    vals = [per_day[t][:, 2] for t in train_days if len(per_day[t])]
    return float(np.concatenate(vals).mean()) if vals else 0.0


def build_dataset(
    spec: GridSpec,
    accidents: str | Path,
    roads: str | Path,
    poi: str | Path | None = None,
    stations: str | Path | None = None,
    holidays: str | Path | None = None,
    train_days: Sequence[int] | None = None,
    n_spec: int = 10,
    network_distance: bool = True,
) -> Dataset:
    """Grid every input and assemble the feature tensors.

    ``train_days`` only feeds the fill value used when a station channel has no
    readings on the first day; it defaults to every day.
    """
    train_days = list(range(spec.num_days)) if train_days is None else list(train_days)
    skipped = {}

    gridded = map_events_to_grid(read_accidents(accidents), spec)
    counts = gridded.values
    skipped["accidents"] = gridded.skipped

    mask, road_attrs = rasterize_roads(read_roads(roads), spec)
    if not mask.any():
        raise ValueError("road file produced an empty road mask")
    if poi is not None:
        pois = map_poi(read_poi(poi), spec)
        poi_grid = pois.values.astype(np.float64)
        skipped["poi"] = pois.skipped
    else:
        poi_grid = np.zeros(spec.shape + (len(POI_NAMES),))
    spectral = spectral_features(mask, n_spec)
    spatial = np.concatenate([poi_grid, road_attrs, spectral], axis=-1)
    spatial_names = list(POI_NAMES) + list(ROAD_NAMES) + [f"spectral_{i + 1}" for i in range(n_spec)]

    temporal = temporal_matrix(spec, load_holidays(holidays))

    st_parts, st_names = [], []
    station_data, skipped["stations"] = read_stations(stations, spec) if stations else ({}, 0)
    road_distance = RoadNetworkDistance(mask, spec.cell_size_km) if network_distance else None
    for kind, names in (("weather", WEATHER_CHANNELS), ("traffic", TRAFFIC_CHANNELS)):
        for name in names:
            per_day = station_data.get(name)
            if per_day is None:
                log.warning("no station readings for channel %s; filling with 0", name)
                st_parts.append(np.zeros(spec.shape + (spec.num_days,)))
            else:
                st_parts.append(
                    impute_channel(
                        per_day,
                        spec,
                        kind=kind,
                        mask=mask,
                        distance=road_distance if kind == "traffic" else None,
                        fill_value=_training_mean(per_day, train_days),
                    )
                )
            st_names.append(name)
    extra = set(station_data) - set(WEATHER_CHANNELS) - set(TRAFFIC_CHANNELS)
    if extra:
        log.warning("ignoring unknown station channels %s", sorted(extra))
    st = np.concatenate([np.stack(st_parts, axis=-1), accident_channels(counts)], axis=-1)
    st_names += list(ACCIDENT_CHANNELS)

    features = FeatureSet(
        spatial=spatial,
        temporal=temporal,
        st=st,
        spatial_names=spatial_names,
        temporal_names=list(TEMPORAL_NAMES),
        st_names=st_names,
        binary_spatial=["road_mask", "road_class_1", "road_class_2", "road_class_3"],
    )
    if not features.all_finite():
        raise FloatingPointError("feature tensors contain non-finite values after imputation")
    return Dataset(spec, counts, mask, features, skipped)
