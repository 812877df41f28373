import datetime as dt
import warnings

import numpy as np
import pytest

from hintnet.grid import GridSpec
from hintnet.kriging import (
    RoadNetworkDistance,
    StationObservation,
    TooFewObservations,
    VariogramModel,
    empirical_variogram,
    euclidean,
    fit_variogram,
    impute_channel,
    merge_duplicates,
    ordinary_krige,
    ordinary_weights,
    universal_krige,
)


def gls_predict(coords, values, model, targets, drift=False):
    """Kriging written as generalized least squares on the covariance
    C(h) = sill - gamma(h); an independent route to the same predictor."""
    C = model.sill - model(euclidean(coords, coords))
    c0 = model.sill - model(euclidean(coords, targets))
    F = np.ones((len(coords), 1))
    f0 = np.ones((1, len(targets)))
    if drift:
        F = np.column_stack([F, coords])
        f0 = np.vstack([f0, targets.T])
    Ci = np.linalg.inv(C)
    beta = np.linalg.solve(F.T @ Ci @ F, F.T @ Ci @ values)
    return f0.T @ beta + c0.T @ Ci @ (values - F @ beta)


def random_field(rng, n=8):
    coords = rng.uniform(0, 50, size=(n, 2))
    values = rng.normal(size=n) + 0.05 * coords[:, 0]
    return coords, values


# --- variogram -------------------------------------------------------------


def test_variogram_shape():
    m = VariogramModel(0.5, 2.0, 10.0)
    assert m(0.0) == 0.0
    h = np.linspace(1e-6, 100, 200)
    g = m(h)
    assert np.all(np.diff(g) >= 0) and g[0] >= 0.5 and g[-1] < 2.0
    with pytest.raises(ValueError):
        VariogramModel(1.0, 1.0, 1.0)


def test_fit_too_few():
    with pytest.raises(TooFewObservations):
        fit_variogram([(0, 0, 1.0)] * 4)


def test_fit_constant_field_falls_back():
    obs = [(x, y, 3.0) for x, y in np.random.default_rng(0).uniform(0, 10, (10, 2))]
    m = fit_variogram(obs)
    assert m.nugget == 0 and m.sill == pytest.approx(1e-12)
    pred = ordinary_krige(obs, m, np.array([[5.0, 5.0], [1.0, 9.0]]))
    assert np.allclose(pred, 3.0, atol=1e-9)


def test_white_noise_nugget_dominates():
    rng = np.random.default_rng(1)
    obs = []
    for day in range(30):
        xy = rng.uniform(0, 100, size=(15, 2))
        obs += [(x, y, v, day) for (x, y), v in zip(xy, rng.normal(size=15))]
    m = fit_variogram(obs)
    assert m.nugget / m.sill > 0.5


def two_cluster_observations(seed, days=100, separation=100.0):
    """Two 30 km discs with means +2 and -2; inside each disc the values carry
    exponentially correlated noise (sill 10, range 10 km)."""
    rng = np.random.default_rng(seed)
    obs = []
    for day in range(days):
        pts, mus = [], []
        for cx, mu in ((0.0, 2.0), (separation, -2.0)):
            r = 30 * np.sqrt(rng.uniform(size=10))
            t = rng.uniform(0, 2 * np.pi, 10)
            pts.append(np.column_stack([cx + r * np.cos(t), r * np.sin(t)]))
            mus += [mu] * 10
        P = np.vstack(pts)
        C = 10 * np.exp(-euclidean(P, P) / 10)
        v = np.array(mus) + np.linalg.cholesky(C + 1e-9 * np.eye(len(P))) @ rng.normal(size=len(P))
        obs += [(x, y, val, day) for (x, y), val in zip(P, v)]
    return obs


@pytest.mark.parametrize("seed", range(3))
def test_two_clusters_range_below_separation(seed):
    m = fit_variogram(two_cluster_observations(seed))
    assert m.range_km < 100


def test_empirical_variogram_matches_pair_loop():
    obs = two_cluster_observations(0, days=3)
    centers, gamma, counts = empirical_variogram(obs, n_bins=15)
    arr = np.array(obs)
    pairs = []
    for day in range(3):
        sub = arr[arr[:, 3] == day]
        for i in range(len(sub)):
            for j in range(i + 1, len(sub)):
                pairs.append((np.hypot(*(sub[i, :2] - sub[j, :2])), 0.5 * (sub[i, 2] - sub[j, 2]) ** 2))
    d = np.array([p[0] for p in pairs])
    sq = np.array([p[1] for p in pairs])
    width = d.max() / 15
    k = 0
    for b in range(15):
        lo, hi = b * width, (b + 1) * width
        sel = (d >= lo) & ((d < hi) if b < 14 else (d <= hi))
        if not sel.any():
            continue
        assert centers[k] == pytest.approx(lo + width / 2)
        assert counts[k] == sel.sum()
        assert gamma[k] == pytest.approx(sq[sel].mean(), rel=1e-12)
        k += 1
    assert k == len(centers)


# --- ordinary Kriging --------------------------------------------------------


def test_single_station_is_constant():
    pred = ordinary_krige([(1.0, 1.0, 7.0)], VariogramModel(0, 1, 5), np.array([[0, 0], [30, 40]]))
    assert pred.tolist() == [7.0, 7.0]


def test_two_station_symmetric_midpoint():
    pred = ordinary_krige([(0.0, 0.0, 2.0), (10.0, 0.0, 4.0)], VariogramModel(0, 1, 5), np.array([[5.0, 0.0]]))
    assert abs(pred[0] - 3.0) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    coords, _ = random_field(rng, 12)
    lam = ordinary_weights(coords, VariogramModel(0.1, 1.5, 12.0), rng.uniform(-10, 60, size=(40, 2)))
    assert np.all(np.abs(lam.sum(axis=0) - 1.0) < 1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_exact_interpolation(seed):
    rng = np.random.default_rng(seed)
    coords, values = random_field(rng, 10)
    obs = np.column_stack([coords, values])
    pred = ordinary_krige(obs, VariogramModel(0.0, 2.0, 15.0), coords)
    assert np.max(np.abs(pred - values)) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_ordinary_matches_gls(seed):
    rng = np.random.default_rng(seed)
    coords, values = random_field(rng, 9)
    model = VariogramModel(0.2, 1.7, 20.0)
    targets = rng.uniform(0, 50, size=(15, 2))
    pred = ordinary_krige(np.column_stack([coords, values]), model, targets)
    assert np.allclose(pred, gls_predict(coords, values, model, targets), atol=1e-9)


def test_duplicates_are_averaged():
    coords, values = merge_duplicates(np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]]), np.array([1.0, 3.0, 9.0]))
    assert len(coords) == 2 and sorted(values.tolist()) == [2.0, 9.0]
    pred = ordinary_krige([(0, 0, 1.0), (0, 0, 3.0)], VariogramModel(0, 1, 1), np.array([[0.0, 0.0]]))
    assert pred[0] == pytest.approx(2.0)


def test_station_observation_input():
    obs = [StationObservation(0, 0, 2.0), StationObservation(10, 0, 4.0)]
    assert ordinary_krige(obs, VariogramModel(0, 1, 5), np.array([[5.0, 0.0]]))[0] == pytest.approx(3.0)


def test_prediction_envelope():
    rng = np.random.default_rng(7)
    coords, values = random_field(rng, 12)
    m = fit_variogram(np.column_stack([coords, values]))
    pred = ordinary_krige(np.column_stack([coords, values]), m, rng.uniform(0, 50, (200, 2)))
    sd = values.std()
    assert pred.min() >= values.min() - 3 * sd and pred.max() <= values.max() + 3 * sd


# --- universal Kriging -------------------------------------------------------


def test_universal_reproduces_plane():
    rng = np.random.default_rng(3)
    coords = rng.uniform(0, 40, size=(8, 2))
    values = 1.5 + 0.3 * coords[:, 0] - 0.7 * coords[:, 1]
    targets = rng.uniform(0, 40, size=(20, 2))
    pred = universal_krige(np.column_stack([coords, values]), VariogramModel(0, 3, 10), targets)
    assert np.allclose(pred, 1.5 + 0.3 * targets[:, 0] - 0.7 * targets[:, 1], atol=1e-6)


def test_universal_constant_field_matches_ordinary():
    rng = np.random.default_rng(4)
    coords = rng.uniform(0, 40, size=(7, 2))
    obs = np.column_stack([coords, np.full(7, 4.2)])
    targets = rng.uniform(0, 40, size=(10, 2))
    m = VariogramModel(0.1, 1.0, 8.0)
    assert np.allclose(universal_krige(obs, m, targets), ordinary_krige(obs, m, targets), atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_universal_matches_gls(seed):
    rng = np.random.default_rng(seed)
    coords, values = random_field(rng, 10)
    model = VariogramModel(0.1, 2.0, 25.0)
    targets = rng.uniform(0, 50, size=(12, 2))
    pred = universal_krige(np.column_stack([coords, values]), model, targets)
    assert np.allclose(pred, gls_predict(coords, values, model, targets, drift=True), atol=1e-8)


def test_universal_falls_back_when_rank_deficient():
    obs = [(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0), (3, 3, 4.0)]  # collinear
    m = VariogramModel(0, 1, 2)
    with pytest.warns(RuntimeWarning):
        pred = universal_krige(obs, m, np.array([[1.5, 1.5]]))
    assert pred[0] == pytest.approx(ordinary_krige(obs, m, np.array([[1.5, 1.5]]))[0])


# --- road-network distance ---------------------------------------------------


def l_mask():
    mask = np.zeros((5, 5), dtype=np.int8)
    mask[0, :] = 1
    mask[:, 0] = 1
    return mask


def test_network_distance_on_l_shape():
    dist = RoadNetworkDistance(l_mask(), 1.0)
    a = np.array([[4.5, 0.5]])  # cell (0, 4)
    b = np.array([[0.5, 4.5]])  # cell (4, 0)
    # three straight steps, one diagonal past the corner, three straight steps
    assert dist(a, b)[0, 0] == pytest.approx(6.0 + np.sqrt(2))
    assert euclidean(a, b)[0, 0] == pytest.approx(np.hypot(4, 4))
    # diagonal step next to the corner
    assert dist(np.array([[1.5, 0.5]]), np.array([[0.5, 1.5]]))[0, 0] == pytest.approx(np.sqrt(2))
    # same cell: Euclidean
    assert dist(np.array([[0.2, 0.2]]), np.array([[0.6, 0.5]]))[0, 0] == pytest.approx(0.5)


def test_network_kriging_differs_from_euclidean():
    dist = RoadNetworkDistance(l_mask(), 1.0)
    obs = np.array([[2.5, 0.5, 1.0], [4.5, 0.5, 1.0], [0.5, 2.5, 5.0], [0.5, 4.5, 5.0]])
    m = VariogramModel(0.0, 1.0, 3.0)
    target = np.array([[3.5, 0.5]])  # between the two horizontal-arm stations
    net = ordinary_krige(obs, m, target, dist)[0]
    euc = ordinary_krige(obs, m, target)[0]
    # along the road the vertical arm is far away, so its weight shrinks
    assert net < euc
    assert abs(net - euc) > 1e-3


# --- imputation --------------------------------------------------------------


def grid_spec(rows=3, cols=4, days=9):
    return GridSpec(rows, cols, 41.0, -95.5, dt.date(2016, 1, 1), days, cell_size_km=5.0)


def test_impute_all_cells_observed_reproduces_input():
    s = grid_spec()
    xx, yy = s.cell_centers_km()
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(3, 4, 9))
    obs = [np.column_stack([xx.ravel(), yy.ravel(), truth[:, :, t].ravel()]) for t in range(9)]
    out = impute_channel(obs, s, "weather", model=VariogramModel(0.0, 1.0, 7.0))
    assert np.allclose(out, truth, atol=1e-9)


def test_impute_single_station_constant():
    s = grid_spec()
    obs = [np.array([[3.0, 4.0, 5.0]]) for _ in range(9)]
    out = impute_channel(obs, s, "weather")
    assert np.all(out == 5.0)


def test_impute_missing_day_repeats_previous():
    s = grid_spec()
    rng = np.random.default_rng(1)
    obs = [np.column_stack([rng.uniform(0, 20, 6), rng.uniform(0, 15, 6), rng.normal(size=6)]) for _ in range(9)]
    obs[4] = np.empty((0, 3))
    obs[0] = np.empty((0, 3))
    out = impute_channel(obs, s, "weather", fill_value=-2.5)
    assert np.array_equal(out[:, :, 4], out[:, :, 3])
    assert np.all(out[:, :, 0] == -2.5)


def test_impute_traffic_only_on_roads():
    s = grid_spec()
    mask = np.zeros((3, 4), dtype=np.int8)
    mask[1, :] = 1
    mask[:, 2] = 1
    rng = np.random.default_rng(2)
    obs = [np.column_stack([rng.uniform(0, 20, 5), rng.uniform(0, 15, 5), 10 + rng.normal(size=5)]) for _ in range(9)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = impute_channel(obs, s, "traffic", mask=mask, distance=RoadNetworkDistance(mask, 5.0))
    assert np.all(out[mask == 0] == 0)
    assert np.all(out[mask == 1] != 0)
    with pytest.raises(ValueError):
        impute_channel(obs, s, "traffic")
