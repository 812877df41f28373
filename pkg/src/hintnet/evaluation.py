"""Splits, baselines, masked error metrics and the knowledge-transfer ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import HyperParams
from .samples import N_WINDOW, PreparedData
from .transfer import cross_level_train, predict_grid, target_days

log = logging.getLogger(__name__)

MIN_SPLIT_DAYS = 8


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]

    @property
    def training_period(self) -> tuple[int, ...]:
        """Every day before the test segment (train plus validation)."""
        return tuple(sorted(self.train + self.validation))

    def to_dict(self):
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}


def make_split(num_days: int, test_fraction: float, val_fraction: float = 0.2, seed: int = 0) -> Split:
    """Chronological test tail; a seeded random ``val_fraction`` of the
    remaining days becomes validation."""
    if not 0 < test_fraction < 1 or not 0 <= val_fraction < 1:
        raise ValueError("fractions must lie in (0, 1)")
    n_test = int(round(num_days * test_fraction))
    n_rest = num_days - n_test
    n_val = int(round(val_fraction * n_rest))
    n_train = n_rest - n_val
    if min(n_test, n_train) < MIN_SPLIT_DAYS or (val_fraction > 0 and n_val < MIN_SPLIT_DAYS):
        raise ValueError(
            f"{num_days} days give train/validation/test sizes {n_train}/{n_val}/{n_test}; "
            f"each needs at least {MIN_SPLIT_DAYS}"
        )
    rng = np.random.default_rng(seed)
    val = np.sort(rng.choice(n_rest, size=n_val, replace=False))
    train = np.setdiff1d(np.arange(n_rest), val)
    return Split(
        train=tuple(int(d) for d in train),
        validation=tuple(int(d) for d in val),
        test=tuple(range(n_rest, num_days)),
    )


def historical_average(counts_train: np.ndarray) -> np.ndarray:
    """Per-cell mean daily count over the given days (last axis)."""
    counts_train = np.asarray(counts_train, dtype=np.float64)
    if counts_train.shape[-1] < 1:
        raise ValueError("need at least one training day")
    return counts_train.mean(axis=-1)


def mse_masked(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over road cells only; ``pred``/``truth`` are [rows, cols, days]."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    sel = np.asarray(mask).astype(bool)
    if not sel.any() or pred.shape[-1] == 0:
        raise ValueError("no unmasked (cell, day) pairs to average over")
    return float(np.mean((pred[sel] - truth[sel]) ** 2))


def improvement_per_level(model_mse: Mapping[int, float], ha_mse: Mapping[int, float]) -> dict:
    """Percent improvement over HA per level; ``None`` where HA error is 0."""
    if set(model_mse) != set(ha_mse):
        raise ValueError("model and HA errors must cover the same levels")
    out = {}
    for v in model_mse:
        ha = ha_mse[v]
        out[v] = None if ha == 0 else 100.0 * (ha - model_mse[v]) / ha
    return out


def per_level_table(levels, mask, pred, ha_pred, truth) -> list[dict]:
    """Rows of (level, road cells, model MSE, HA MSE, improvement %), highest level first."""
    levels = np.asarray(levels)
    mask = np.asarray(mask).astype(bool)
    rows = []
    for v in sorted({int(x) for x in np.unique(levels[mask])}, reverse=True):
        sel = mask & (levels == v)
        m = mse_masked(pred, truth, sel)
        h = mse_masked(ha_pred, truth, sel)
        imp = improvement_per_level({v: m}, {v: h})[v]
        rows.append({"level": v, "cells": int(sel.sum()), "model_mse": m, "ha_mse": h, "improvement_pct": imp})
    return rows


# ---------------------------------------------------------------------------
# linear regression baseline


def _lr_design(data: PreparedData, cells, days):
    b = data.batch(cells, days)
    P = b.st.shape[2]
    center = P // 2
    parts = [
        b.st[:, :, center, :].reshape(len(days), -1),
        b.temporal.reshape(len(days), -1),
        b.spatial[:, center, :],
        np.ones((len(days), 1)),
    ]
    return np.concatenate(parts, axis=1), b.target


def linear_regression_baseline(
    data: PreparedData, train_days, test_days, max_samples: int = 50000, seed: int = 0, chunk: int = 4096
) -> np.ndarray:
    """Least-squares regression on the centre cell's features, fitted on all road
    cells. Returns predictions [rows, cols, len(test_days)], 0 off-road."""
    rng = np.random.default_rng(seed)
    cells = np.argwhere(data.mask)
    train_t = target_days(train_days)
    pairs = len(cells) * len(train_t)
    pick = np.sort(rng.choice(pairs, size=min(max_samples, pairs), replace=False))
    X, y = _lr_design(data, cells[pick // len(train_t)], train_t[pick % len(train_t)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    test_days = np.asarray(test_days)
    out = np.zeros(data.mask.shape + (len(test_days),))
    all_cells = np.repeat(cells, len(test_days), axis=0)
    all_days = np.tile(test_days, len(cells))
    col = np.tile(np.arange(len(test_days)), len(cells))
    for s in range(0, len(all_days), chunk):
        sl = slice(s, s + chunk)
        Xt, _ = _lr_design(data, all_cells[sl], all_days[sl])
        out[all_cells[sl, 0], all_cells[sl, 1], col[sl]] = Xt @ coef
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# knowledge-transfer ablation


def _summary(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(a.mean()),
        "variance": float(a.var()),
        "median": float(np.median(a)),
        "min": float(a.min()),
        "max": float(a.max()),
    }


def ablation_transfer(
    levels: np.ndarray,
    data: PreparedData,
    split: Split,
    hyper: HyperParams,
    n_runs: int = 10,
    arms: Mapping[str, bool] | None = None,
    targets: Mapping[int, float] | None = None,
) -> dict:
    """Train with and without warm starts over ``n_runs`` seeds.

    Epoch cost is the first epoch at which a level's validation error reaches
    its target; targets default to the best validation errors of a reference
    run without transfer (seed ``hyper.seed``). Runs that never reach a target
    are charged ``hyper.epochs`` and flagged. Each run's cost is averaged over
    levels.
    """
    arms = dict(arms or {"with_transfer": True, "without_transfer": False})
    test = np.asarray(split.test)
    truth = data.counts[:, :, test]
    if targets is None:
        ref = cross_level_train(levels, data, split.train, split.validation, hyper, transfer=False)
        targets = {v: ref.reports[v].best_val_loss for v in ref.order}
    targets = {int(k): float(v) for k, v in targets.items()}

    report = {"n_runs": n_runs, "targets": {str(k): v for k, v in sorted(targets.items())}, "arms": {}}
    for name, transfer in arms.items():
        mses, costs, per_level, flags = [], [], [], []
        for r in range(n_runs):
            hp = hyper.replace(seed=hyper.seed + r)
            pool = cross_level_train(levels, data, split.train, split.validation, hp, transfer=transfer)
            pred = predict_grid(pool, levels, data, test)
            mses.append(mse_masked(pred, truth, data.mask))
            epochs = {}
            for v in pool.order:
                reached = pool.reports[v].epochs_to_target(targets[v])
                if reached is None:
                    flags.append({"run": r, "level": v})
                    reached = hyper.epochs
                epochs[str(v)] = reached
            per_level.append(epochs)
            costs.append(float(np.mean(list(epochs.values()))))
            log.info("ablation %s run %d: test mse %.5f, epochs %.2f", name, r, mses[-1], costs[-1])
        report["arms"][name] = {
            "transfer": transfer,
            "test_mse": mses,
            "epochs_to_target": costs,
            "epochs_per_level": per_level,
            "not_reached": flags,
            "test_mse_summary": _summary(mses),
            "epochs_summary": _summary(costs),
        }
    return report
