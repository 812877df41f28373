import json
from collections import deque
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hintnet.partition import (
    BORDER,
    CRITICAL,
    OUTLIER,
    MRSPParams,
    RSPParams,
    aggregate_levels,
    classify_cells,
    count_accidents,
    m_rsp,
    rsp,
)

FIXTURE = Path(__file__).parent / "fixtures" / "single_hotspot_10x10.json"


def brute_classes(counts, p):
    """Cell classes by explicit neighbourhood loops."""
    R, C = counts.shape
    hr = (counts > p.min_points) & (counts >= p.min_risk)

    def block(r, c):
        return [(i, j) for i in range(r - p.eps, r + p.eps + 1) for j in range(c - p.eps, c + p.eps + 1)
                if 0 <= i < R and 0 <= j < C]

    crit = np.array([[sum(hr[i, j] for i, j in block(r, c)) > p.min_neighbors for c in range(C)] for r in range(R)])
    out = np.zeros((R, C), dtype=int)
    for r in range(R):
        for c in range(C):
            if crit[r, c]:
                out[r, c] = CRITICAL
            elif any(crit[i, j] for i, j in block(r, c)):
                out[r, c] = BORDER
    return out


def components(classes, eps):
    """Connected critical components (through eps-blocks) plus their borders."""
    R, C = classes.shape
    seen = np.zeros((R, C), dtype=bool)
    regions = []
    for r in range(R):
        for c in range(C):
            if classes[r, c] != CRITICAL or seen[r, c]:
                continue
            comp = set()
            q = deque([(r, c)])
            seen[r, c] = True
            while q:
                a, b = q.popleft()
                comp.add((a, b))
                for i in range(max(a - eps, 0), min(a + eps + 1, R)):
                    for j in range(max(b - eps, 0), min(b + eps + 1, C)):
                        if classes[i, j] == CRITICAL and not seen[i, j]:
                            seen[i, j] = True
                            q.append((i, j))
            regions.append(comp)
    return regions


# --- classify --------------------------------------------------------------


def test_all_zero_is_outlier():
    assert np.all(classify_cells(np.zeros((6, 6)), RSPParams(1, 0, 0, 0)) == OUTLIER)


def test_single_hotspot_classes():
    counts = np.zeros((9, 9))
    counts[4, 4] = 100
    cls = classify_cells(counts, RSPParams(eps=1, min_points=5, min_risk=0, min_neighbors=0))
    expected = np.zeros((9, 9), dtype=int)
    expected[2:7, 2:7] = BORDER
    expected[3:6, 3:6] = CRITICAL
    assert np.array_equal(cls, expected)


def test_beta_at_max_gives_all_outlier():
    counts = np.full((5, 5), 50)
    assert np.all(classify_cells(counts, RSPParams(1, 1, 0, 9)) == OUTLIER)


def test_all_high_beta_zero_no_outliers():
    counts = np.full((6, 7), 20)
    labels = rsp(counts, RSPParams(1, 5, 5, 0))
    assert np.all(labels > 0)


def test_min_risk_filters():
    counts = np.zeros((5, 5))
    counts[2, 2] = 4
    assert np.any(classify_cells(counts, RSPParams(1, 2, 0, 0)) == CRITICAL)
    assert np.all(classify_cells(counts, RSPParams(1, 2, 5, 0)) == OUTLIER)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.int64, (8, 9), elements=st.integers(0, 12)),
    st.integers(1, 2),
    st.integers(0, 6),
    st.integers(0, 8),
)
def test_classify_matches_brute_force(counts, eps, gamma, beta):
    p = RSPParams(eps=eps, min_points=gamma, min_risk=0, min_neighbors=min(beta, (2 * eps + 1) ** 2))
    assert np.array_equal(classify_cells(counts, p), brute_classes(counts, p))


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        classify_cells(-np.ones((3, 3)), RSPParams())


def test_param_validation():
    with pytest.raises(ValueError):
        RSPParams(eps=0)
    with pytest.raises(ValueError):
        RSPParams(eps=1, min_neighbors=10)
    with pytest.raises(ValueError):
        MRSPParams(eta=0)


# --- rsp -------------------------------------------------------------------


def test_rsp_all_outlier():
    assert np.all(rsp(np.zeros((5, 5)), RSPParams(1, 1, 0, 0)) == 0)


def test_rsp_two_hotspots():
    counts = np.zeros((10, 10))
    counts[1, 1] = 50
    counts[8, 8] = 50
    labels = rsp(counts, RSPParams(1, 5, 0, 0))
    assert set(np.unique(labels)) == {0, 1, 2}
    assert labels[1, 1] != labels[8, 8]


def test_rsp_one_hotspot_equals_classes():
    counts = np.zeros((10, 10))
    counts[5, 4] = 30
    p = RSPParams(1, 5, 0, 0)
    labels = rsp(counts, p)
    cls = classify_cells(counts, p)
    assert set(np.unique(labels)) == {0, 1}
    assert np.array_equal(labels > 0, cls != OUTLIER)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (10, 10), elements=st.integers(0, 9)), st.integers(0, 4), st.integers(0, 6))
def test_rsp_regions_are_components(counts, gamma, beta):
    p = RSPParams(eps=1, min_points=gamma, min_risk=0, min_neighbors=beta)
    labels = rsp(counts, p)
    cls = classify_cells(counts, p)
    comps = components(cls, 1)
    # each critical component carries one id, distinct ids for distinct components
    ids = []
    for comp in comps:
        vals = {int(labels[r, c]) for r, c in comp}
        assert len(vals) == 1 and 0 not in vals
        ids.append(vals.pop())
    assert len(set(ids)) == len(ids)
    assert np.array_equal(labels > 0, cls != OUTLIER)


# --- m_rsp -----------------------------------------------------------------


def test_m_rsp_all_zero():
    levels = m_rsp(np.zeros((10, 10)), None, MRSPParams(eta=5, eps=1, min_points=0))
    assert np.all(levels == 0)


def test_single_hotspot_hand_trace():
    fx = json.loads(FIXTURE.read_text())
    counts = np.array(fx["counts"])
    levels = m_rsp(counts, None, MRSPParams(**fx["params"]))
    assert np.array_equal(levels, np.array(fx["expected_levels"]))
    assert np.array_equal(aggregate_levels(levels, 2), np.array(fx["expected_aggregated_k2"]))


def test_masked_cell_forced_to_zero():
    fx = json.loads(FIXTURE.read_text())
    mask = np.ones((10, 10), dtype=np.int8)
    mask[4, 4] = 0
    levels = m_rsp(np.array(fx["counts"]), mask, MRSPParams(**fx["params"]))
    assert levels[4, 4] == 0
    assert levels[4, 3] == 9


def test_monotone_field_levels_increase_toward_centre():
    n = 15
    r, c = np.mgrid[:n, :n]
    d = np.maximum(np.abs(r - 7), np.abs(c - 7))
    counts = (8 - d) ** 2 * 5
    levels = m_rsp(counts, None, MRSPParams(eta=20, eps=1, min_points=4))
    for k in range(7):
        inner = levels[d == k]
        outer = levels[d == k + 1]
        assert inner.min() >= outer.max()


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, (12, 12), elements=st.integers(0, 15)), st.floats(1, 200), st.integers(0, 5))
def test_m_rsp_coverage(counts, eta, gamma):
    levels = m_rsp(counts, None, MRSPParams(eta=eta, eps=1, min_points=gamma))
    assert levels.min() >= 0 and levels.max() <= 10


def test_count_accidents():
    counts = np.array([[1, 2], [3, 7]])
    assert count_accidents(np.zeros((0, 2), dtype=int), counts) == 0
    assert count_accidents([(1, 1)], counts) == 7
    assert count_accidents([(0, 0), (0, 1), (1, 0)], counts) == 6
    assert count_accidents(counts > 2, counts) == 10


# --- aggregation -----------------------------------------------------------


def test_aggregate_examples():
    lv = np.array([0, 1, 2, 3, 4])
    assert aggregate_levels(lv, 1).tolist() == [0, 1, 2, 3, 4]
    assert aggregate_levels(lv, 2).tolist() == [0, 1, 1, 2, 2]
    with pytest.raises(ValueError):
        aggregate_levels(lv, 0)


def test_aggregate_monotone_exhaustive():
    lv = np.arange(11)
    for k in range(1, 12):
        agg = aggregate_levels(lv, k)
        assert np.all(np.diff(agg) >= 0)
        assert agg[0] == 0 and np.all(agg[1:] >= 1)
