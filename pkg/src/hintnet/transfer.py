"""Cross-level training with warm starts and integration of per-level predictions."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import HyperParams, InputDims, ModelParams, TrainReport, TrainingDiverged, init_params, predict, train_level
from .samples import N_WINDOW, PreparedData, level_cells, make_samples

log = logging.getLogger(__name__)

POOL_VERSION = 1


def array_hash(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def level_order(levels: np.ndarray, mask: np.ndarray | None = None) -> list[int]:
    """Populated nonzero levels, most urban (highest id) first."""
    levels = np.asarray(levels)
    if mask is not None:
        levels = np.where(np.asarray(mask).astype(bool), levels, 0)
    order = sorted({int(v) for v in np.unique(levels) if v > 0}, reverse=True)
    if not order:
        raise ValueError("level map has no nonzero levels to train")
    return order


def _seed(seed: int, level: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, level, stream]).generate_state(1)[0])


@dataclass
class ModelPool:
    order: list[int]
    params: dict[int, ModelParams] = field(default_factory=dict)
    reports: dict[int, TrainReport] = field(default_factory=dict)
    initial: dict[int, ModelParams] = field(default_factory=dict)
    trained: list[int] = field(default_factory=list)
    hyper: HyperParams | None = None
    transfer: bool = True

    def __contains__(self, level):
        return level in self.params

    def save(self, directory: str | Path, levelmap_hash: str, config_hash: str = "", seed: int | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for v in self.order:
            name = f"level_{v}.json"
            payload = {
                "version": POOL_VERSION,
                "level": v,
                "hyper": self.hyper.to_dict() if self.hyper else None,
                "shapes": {k: list(s) for k, s in self.params[v].shapes().items()},
                "params": self.params[v].to_dict(),
                "report": self.reports[v].summary() if v in self.reports else None,
            }
            (directory / name).write_text(json.dumps(payload, sort_keys=True))
            files[str(v)] = name
        manifest = {
            "version": POOL_VERSION,
            "level_order": self.order,
            "trained": self.trained,
            "transfer": self.transfer,
            "levelmap_hash": levelmap_hash,
            "config_hash": config_hash,
            "seed": seed,
            "files": files,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path, levelmap_hash: str | None = None) -> "ModelPool":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("version") != POOL_VERSION:
            raise ValueError(f"unsupported pool version {manifest.get('version')}")
        if levelmap_hash is not None and manifest["levelmap_hash"] != levelmap_hash:
            raise ValueError(
                "model pool was trained on a different level map; re-run `hintnet train` after `hintnet partition`"
            )
        pool = cls(order=list(manifest["level_order"]), trained=list(manifest["trained"]), transfer=manifest["transfer"])
        for v in pool.order:
            payload = json.loads((directory / manifest["files"][str(v)]).read_text())
            pool.params[v] = ModelParams.from_dict(payload["params"])
            if payload.get("hyper"):
                hp = dict(payload["hyper"])
                if hp.get("trainable") is not None:
                    hp["trainable"] = tuple(hp["trainable"])
                pool.hyper = HyperParams(**hp)
        return pool


def target_days(days: Sequence[int]) -> np.ndarray:
    return np.asarray([d for d in sorted(days) if d >= N_WINDOW], dtype=np.int64)


def cross_level_train(
    levels: np.ndarray,
    data: PreparedData,
    train_days: Sequence[int],
    val_days: Sequence[int],
    hyper: HyperParams,
    transfer: bool = True,
    level_hyper: dict[int, HyperParams] | None = None,
) -> ModelPool:
    """Train one model per level, most urban first.

    With ``transfer`` each level starts from a copy of the previously trained
    level's final parameters; otherwise from a fresh seeded initialization.
    """
    order = level_order(levels, data.mask)
    dims = InputDims(
        n_st=data.st.shape[-1], n_t=data.temporal.shape[-1], n_s=data.spatial.shape[-1], n_days=N_WINDOW
    )
    pool = ModelPool(order=order, hyper=hyper, transfer=transfer)
    train_t = target_days(train_days)
    val_t = target_days(val_days)
    previous = None
    for v in order:
        hp = (level_hyper or {}).get(v, hyper)
        if transfer and previous is not None:
            start = pool.params[previous].copy()
        else:
            start = init_params(dims, hp, np.random.default_rng(_seed(hp.seed, v, 0)))
        pool.initial[v] = start.copy()
        train = make_samples(data, levels, v, train_t)
        val = make_samples(data, levels, v, val_t)
        try:
            params, report = train_level(train, start, hp.replace(seed=_seed(hp.seed, v, 1)), val)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"level {v}: {exc}", exc.report) from exc
        except ValueError as exc:
            raise ValueError(f"level {v}: {exc}") from exc
        log.info(
            "level %d: %d train samples, %d epochs, best val %.5f",
            v, len(train), report.epochs_run, report.best_val_loss,
        )
        pool.params[v] = params
        pool.reports[v] = report
        pool.trained.append(v)
        previous = v
    return pool


def predict_grid(
    pool: ModelPool,
    levels: np.ndarray,
    data: PreparedData,
    days: Sequence[int],
    clamp: bool = True,
    batch_size: int = 1024,
) -> np.ndarray:
    """Predicted counts [rows, cols, len(days)]; each road cell uses the model of
    its level, level-0 and off-road cells are 0."""
    levels = np.asarray(levels)
    days = np.asarray(days, dtype=np.int64)
    rows, cols = levels.shape
    out = np.zeros((rows, cols, len(days)))
    activation = pool.hyper.activation if pool.hyper else "relu"
    for v in level_order(levels, data.mask) if np.any((levels > 0) & data.mask) else []:
        if v not in pool:
            raise KeyError(f"model pool has no model for level {v}")
        cells = level_cells(levels, data.mask, v)
        all_cells = np.repeat(cells, len(days), axis=0)
        all_days = np.tile(days, len(cells))
        col = np.tile(np.arange(len(days)), len(cells))
        for start in range(0, len(all_days), batch_size):
            sl = slice(start, start + batch_size)
            b = data.batch(all_cells[sl], all_days[sl])
            y = predict(b, pool.params[v], activation)
            out[all_cells[sl, 0], all_cells[sl, 1], col[sl]] = y
    if clamp:
        np.maximum(out, 0.0, out=out)
    return out
