import datetime as dt

import numpy as np
import pytest

from hintnet.grid import GridSpec
from hintnet.pipeline import (
    ACCIDENT_CHANNELS,
    TRAFFIC_CHANNELS,
    WEATHER_CHANNELS,
    Dataset,
    accident_channels,
    build_dataset,
    read_stations,
)

SPEC = GridSpec(rows=4, cols=4, origin_lat=41.0, origin_lon=-95.5, time_start=dt.date(2020, 1, 1), num_days=8,
                cell_size_km=5.0)


def write(path, text):
    path.write_text(text)
    return path


def test_accident_channels_against_loops():
    rng = np.random.default_rng(0)
    counts = rng.poisson(1.0, size=(2, 3, 400))
    out = accident_channels(counts)
    for r in range(2):
        for c in range(3):
            for t in (0, 5, 27, 28, 100, 364, 365, 399):
                s28 = counts[r, c, max(0, t - 27) : t + 1]
                s365 = counts[r, c, max(0, t - 364) : t + 1]
                assert out[r, c, t, 0] == counts[r, c, t]
                assert abs(out[r, c, t, 1] - s28.mean()) < 1e-12
                assert abs(out[r, c, t, 2] - s365.mean()) < 1e-12


def test_read_stations_duplicates_and_range(tmp_path):
    lat, lon = SPEC.to_latlon(7.5, 2.5)
    p = write(
        tmp_path / "s.csv",
        "station_id,lat,lon,date,channel,value\n"
        f"A,{lat},{lon},2020-01-01,precipitation,1.0\n"
        f"A,{lat},{lon},2020-01-01,precipitation,2.5\n"
        f"A,{lat},{lon},2020-01-03,precipitation,4.0\n"
        f"A,{lat},{lon},2021-01-01,precipitation,9.0\n",
    )
    data, skipped = read_stations(p, SPEC)
    assert skipped == 1
    pr = data["precipitation"]
    assert len(pr) == 8 and len(pr[1]) == 0
    assert pr[0].shape == (1, 3) and pr[0][0, 2] == 2.5
    assert np.allclose(pr[0][0, :2], [7.5, 2.5])


def test_read_stations_errors(tmp_path):
    with pytest.raises(ValueError, match="header"):
        read_stations(write(tmp_path / "a.csv", "id,lat\n"), SPEC)
    bad = write(tmp_path / "b.csv", "station_id,lat,lon,date,channel,value\nA,41,-95,2020-01-01,wind,abc\n")
    with pytest.raises(ValueError, match=":2:"):
        read_stations(bad, SPEC)


def test_build_dataset_on_tiny_world(tiny_dataset, tiny_world):
    ds = tiny_dataset
    f = ds.features
    rows, cols, days = 16, 16, 120
    assert ds.counts.shape == (rows, cols, days)
    assert np.array_equal(ds.counts, tiny_world.counts)
    assert np.array_equal(ds.mask.astype(bool), tiny_world.mask.astype(bool))
    assert f.st_names == list(WEATHER_CHANNELS) + list(TRAFFIC_CHANNELS) + list(ACCIDENT_CHANNELS)
    assert f.st.shape == (rows, cols, days, len(f.st_names))
    assert f.spatial.shape == (rows, cols, 13 + 6 + 4)
    assert f.temporal.shape[0] == days
    assert f.all_finite()
    # traffic is only imputed on road cells
    speed = f.st[..., f.st_names.index("speed")]
    assert np.all(speed[ds.mask == 0] == 0)
    assert np.any(speed[ds.mask > 0] != 0)


def test_dataset_roundtrip(tiny_dataset, tmp_path):
    path = tmp_path / "d.npz"
    tiny_dataset.save(path, meta={"seed": 3})
    back = Dataset.load(path)
    assert back.meta == {"seed": 3}
    assert back.spec == tiny_dataset.spec
    for a, b in ((back.counts, tiny_dataset.counts), (back.features.st, tiny_dataset.features.st),
                 (back.features.spatial, tiny_dataset.features.spatial)):
        assert np.array_equal(a, b)
    assert back.features.binary_spatial == tiny_dataset.features.binary_spatial


def test_first_day_without_readings_uses_training_mean(tmp_path):
    lat, lon = SPEC.to_latlon(10.0, 10.0)
    lat2, lon2 = SPEC.to_latlon(2.5, 17.5)
    acc = write(tmp_path / "acc.csv", f"timestamp,lat,lon\n2020-01-02T08:00:00,{lat},{lon}\n")
    a, b = SPEC.to_latlon(0.5, 10.0), SPEC.to_latlon(19.5, 10.0)
    roads = write(tmp_path / "roads.csv", f"lat1,lon1,lat2,lon2,speed_limit,aadt,road_class\n{a[0]},{a[1]},{b[0]},{b[1]},55,1000,1\n")
    stations = write(
        tmp_path / "st.csv",
        "station_id,lat,lon,date,channel,value\n"
        f"A,{lat},{lon},2020-01-02,temp_max,3.0\n"
        f"B,{lat2},{lon2},2020-01-02,temp_max,5.0\n"
        f"A,{lat},{lon},2020-01-03,temp_max,11.0\n"
        f"B,{lat2},{lon2},2020-01-03,temp_max,13.0\n",
    )
    ds = build_dataset(SPEC, acc, roads, stations=stations, train_days=[0, 1], n_spec=2)
    tmax = ds.features.st[..., ds.features.st_names.index("temp_max")]
    assert np.all(tmax[:, :, 0] == 4.0)
    assert ds.counts.sum() == 1


def test_empty_road_mask_rejected(tmp_path):
    acc = write(tmp_path / "acc.csv", "timestamp,lat,lon\n")
    roads = write(tmp_path / "roads.csv", "lat1,lon1,lat2,lon2,speed_limit,aadt,road_class\n")
    with pytest.raises(ValueError, match="empty road mask"):
        build_dataset(SPEC, acc, roads, n_spec=2)
