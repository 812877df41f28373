import filecmp

import numpy as np
import pytest

from hintnet.grid import map_events_to_grid, read_accidents
from hintnet.synth import RURAL, URBAN, SynthSpec, generate


@pytest.fixture(scope="module")
def default_world():
    return generate(SynthSpec())


def test_same_seed_byte_identical(tiny_world, tmp_path):
    again = generate(tiny_world.spec, tmp_path)
    for key, path in tiny_world.files.items():
        assert filecmp.cmp(path, again.files[key], shallow=False), key


def test_different_seed_differs():
    a = generate(SynthSpec(rows=16, cols=16, num_days=60, seed=1, urban_centers=((8, 8),), urban_radius=2.5,
                           suburban_radius=5.5, corridors=()))
    b = generate(SynthSpec(rows=16, cols=16, num_days=60, seed=2, urban_centers=((8, 8),), urban_radius=2.5,
                           suburban_radius=5.5, corridors=()))
    assert not np.array_equal(a.counts, b.counts)


def test_urban_rate_exceeds_rural(default_world):
    w = default_world
    road = w.mask > 0
    urban = w.counts[(w.zones == URBAN) & road].mean()
    rural = w.counts[(w.zones == RURAL) & road].mean()
    assert urban > 5 * rural


def test_wet_day_ratio_on_urban_cells(default_world):
    w = default_world
    urban = w.counts[(w.zones == URBAN) & (w.mask > 0)].astype(float)  # [cells, days]
    daily = urban.mean(axis=0)
    weekday = np.array([d.weekday() for d in w.spec.grid.dates()])
    ratios = []
    for k in range(7):
        sel = weekday == k
        wet, dry = daily[sel & w.wet], daily[sel & ~w.wet]
        ratios.append(wet.mean() / dry.mean())
    ratio = float(np.mean(ratios))
    assert abs(ratio - w.spec.wet_multiplier) < 0.2 * w.spec.wet_multiplier, ratio


def test_events_on_road_cells_and_totals(tiny_world):
    spec = tiny_world.spec
    gridded = map_events_to_grid(read_accidents(tiny_world.files["accidents"]), spec.grid)
    assert gridded.skipped == 0
    assert np.array_equal(gridded.values, tiny_world.counts)
    assert np.all(gridded.values.sum(axis=2)[tiny_world.mask == 0] == 0)
    with open(tiny_world.files["accidents"]) as fh:
        n_lines = sum(1 for _ in fh) - 1
    assert n_lines == int(tiny_world.counts.sum())
    assert tiny_world.counts.dtype.kind in "iu" and tiny_world.counts.min() >= 0


def test_rate_consistent_with_counts(default_world):
    w = default_world
    rate = w.rate()
    road = w.mask > 0
    assert np.all(rate[~road] == 0)
    # Poisson: the grand mean sits within a few standard errors of the expected rate
    expected, observed = rate[road].sum(), w.counts[road].sum()
    assert abs(observed - expected) < 5 * np.sqrt(expected)


def test_files_written(tiny_world):
    for key in ("accidents", "roads", "poi", "stations", "holidays", "world"):
        with open(tiny_world.files[key]) as fh:
            assert fh.readline()


@pytest.mark.parametrize(
    "kw",
    [dict(rows=8), dict(rate_rural=0.0), dict(rate_suburban=1.0), dict(weekday_factors=(1, 1, 1)), dict(wet_multiplier=0)],
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)
