"""Command-line entry point: ``hintnet <command> [--config PATH] [--seed N] [--out DIR]``.

Stages communicate through files in the output directory:

    ingest     -> dataset.npz
    partition  -> levelmap.csv (+ levelmap.geojson with ``--levels geojson``)
    train      -> pool/ (per-level parameters and manifest.json)
    predict    -> predictions.csv
    evaluate   -> metrics.json
    ablate     -> ablation.json (and the ablation block of metrics.json)
    report     -> printed tables

Each run also records ``run.json`` with the config hash, the seed and a
digest of every artifact written.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config, render_config
from .evaluation import (
    ablation_transfer,
    historical_average,
    linear_regression_baseline,
    make_split,
    mse_masked,
    per_level_table,
)
from .model import TrainingDiverged
from .partition import aggregate_levels, m_rsp
from .pipeline import Dataset, build_dataset
from .samples import PreparedData
from .synth import SynthSpec, generate
from .transfer import ModelPool, array_hash, cross_level_train, predict_grid

log = logging.getLogger("hintnet")


class StageError(RuntimeError):
    """A missing or stale input artifact; the message says how to fix it."""


# ---------------------------------------------------------------------------
# artifacts


def _write_text(path: Path, text: str, ctx) -> None:
    path.write_text(text)
    ctx.record(path)


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Context:
    def __init__(self, cfg: Config, out: Path):
        self.cfg = cfg
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def record(self, path: Path) -> None:
        run_file = self.out / "run.json"
        run = json.loads(run_file.read_text()) if run_file.exists() else {"artifacts": {}}
        run["config_hash"] = self.cfg.hash()
        run["seed"] = self.seed
        rel = str(path.relative_to(self.out)) if path.is_relative_to(self.out) else str(path)
        run["artifacts"][rel] = {
            "sha256": _file_digest(path),
            "config_hash": self.cfg.hash(),
            "seed": self.seed,
        }
        run_file.write_text(_json_text(run))

    def split(self, num_days: int):
        return make_split(num_days, self.cfg.test_fraction, self.cfg.val_fraction, self.cfg.split_seed)

    def dataset(self) -> Dataset:
        path = self.out / "dataset.npz"
        if not path.exists():
            raise StageError(f"{path} not found; run `hintnet ingest` first")
        return Dataset.load(path)

    def levels(self, ds: Dataset) -> np.ndarray:
        path = self.out / "levelmap.csv"
        if not path.exists():
            raise StageError(f"{path} not found; run `hintnet partition` first")
        levels = read_levelmap(path)
        if levels.shape != ds.mask.shape:
            raise StageError(f"levelmap.csv is {levels.shape}, dataset grid is {ds.mask.shape}; re-run `hintnet partition`")
        return levels

    def pool(self, levels: np.ndarray) -> ModelPool:
        path = self.out / "pool"
        if not (path / "manifest.json").exists():
            raise StageError(f"{path} has no manifest.json; run `hintnet train` first")
        try:
            return ModelPool.load(path, levelmap_hash=array_hash(levels))
        except ValueError as exc:
            raise StageError(str(exc)) from None


def _file_digest(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
        return h.hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_levelmap_csv(levels: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in levels:
        w.writerow([int(v) for v in row])
    return buf.getvalue()


def read_levelmap(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[int(v) for v in row] for row in csv.reader(fh) if row]
    if not rows or len({len(r) for r in rows}) != 1:
        raise StageError(f"{path} is not a rectangular integer matrix")
    return np.array(rows, dtype=np.int64)


def levelmap_geojson(levels: np.ndarray, mask: np.ndarray, ds: Dataset, meta: dict) -> dict:
    features = []
    for r in range(levels.shape[0]):
        for c in range(levels.shape[1]):
            features.append(
                {
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [ds.spec.cell_polygon(r, c)]},
                    "properties": {"row": r, "col": c, "level": int(levels[r, c]), "road": int(mask[r, c])},
                }
            )
    return {"type": "FeatureCollection", "hintnet": meta, "features": features}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ctx: Context, args) -> int:
    cfg = ctx.cfg
    target = Path(args.out) if args.out else cfg.path("accidents").parent
    spec = SynthSpec(
        rows=cfg.rows,
        cols=cfg.cols,
        num_days=cfg.num_days,
        seed=cfg.seed,
        time_start=cfg.time_start,
        origin_lat=cfg.origin_lat,
        origin_lon=cfg.origin_lon,
        cell_size_km=cfg.cell_size_km,
    )
    world = generate(spec, target)
    print(f"synthetic world: {int(world.mask.sum())} road cells, {int(world.counts.sum())} accidents -> {target}")
    return 0


def cmd_ingest(ctx: Context, args) -> int:
    cfg = ctx.cfg
    spec = cfg.grid
    split = ctx.split(spec.num_days)
    inputs = {}
    for key in ("accidents", "roads", "poi", "stations", "holidays"):
        p = cfg.path(key)
        if not p.exists():
            if key in ("accidents", "roads"):
                raise StageError(f"{p} not found; set `{key}`/`data_dir` in the config or run `hintnet synth`")
            log.warning("%s not found; continuing without it", p)
            p = None
        inputs[key] = p
    ds = build_dataset(
        spec,
        inputs["accidents"],
        inputs["roads"],
        poi=inputs["poi"],
        stations=inputs["stations"],
        holidays=inputs["holidays"],
        train_days=split.training_period,
        n_spec=cfg.n_spec,
        network_distance=cfg.network_distance,
    )
    path = ctx.out / "dataset.npz"
    ds.save(path, meta={"config_hash": cfg.hash(), "seed": cfg.seed})
    ctx.record(path)
    print(
        f"dataset: {spec.rows}x{spec.cols} grid, {spec.num_days} days, {int(ds.counts.sum())} accidents "
        f"({ds.skipped.get('accidents', 0)} skipped), {int(ds.mask.sum())} road cells -> {path}"
    )
    return 0


def partition_levels(ds: Dataset, cfg: Config, split) -> np.ndarray:
    totals = ds.counts[:, :, list(split.training_period)].sum(axis=2)
    return aggregate_levels(m_rsp(totals, ds.mask, cfg.mrsp), cfg.k)


def cmd_partition(ctx: Context, args) -> int:
    ds = ctx.dataset()
    levels = partition_levels(ds, ctx.cfg, ctx.split(ds.spec.num_days))
    _write_text(ctx.out / "levelmap.csv", write_levelmap_csv(levels), ctx)
    if args.levels == "geojson":
        meta = {"config_hash": ctx.cfg.hash(), "seed": ctx.seed, "levelmap_hash": array_hash(levels)}
        _write_text(ctx.out / "levelmap.geojson", json.dumps(levelmap_geojson(levels, ds.mask, ds, meta)), ctx)
    road = ds.mask.astype(bool)
    values, cells = np.unique(levels[road], return_counts=True)
    summary = ", ".join(f"level {v}: {n}" for v, n in zip(values.tolist(), cells.tolist()))
    print(f"levelmap ({summary} road cells) -> {ctx.out / 'levelmap.csv'}")
    return 0


def _prepared(ds: Dataset, ctx: Context, split) -> PreparedData:
    return PreparedData(ds.counts, ds.features, ds.mask, split.training_period, ctx.cfg.w)


def cmd_train(ctx: Context, args) -> int:
    ds = ctx.dataset()
    levels = ctx.levels(ds)
    split = ctx.split(ds.spec.num_days)
    data = _prepared(ds, ctx, split)
    transfer = args.transfer != "off"
    pool = cross_level_train(levels, data, split.train, split.validation, ctx.cfg.hyper, transfer=transfer)
    path = ctx.out / "pool"
    pool.save(path, array_hash(levels), ctx.cfg.hash(), ctx.seed)
    ctx.record(path)
    for v in pool.order:
        r = pool.reports[v]
        print(f"level {v}: {r.epochs_run} epochs, best validation MSE {r.best_val_loss:.5f} (epoch {r.best_epoch})")
    print(f"model pool ({'with' if transfer else 'without'} transfer) -> {path}")
    return 0


def _parse_days(text: str | None, ds: Dataset, split) -> list[int]:
    if not text:
        return list(split.test)
    days = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            a, b = (dt.date.fromisoformat(s) for s in part.split(":", 1))
            days.extend(range(ds.spec.day_index(a), ds.spec.day_index(b) + 1))
        else:
            days.append(ds.spec.day_index(dt.date.fromisoformat(part)))
    bad = [d for d in days if not 7 <= d < ds.spec.num_days]
    if bad:
        raise StageError(f"dates must fall between day 7 and day {ds.spec.num_days - 1} of the grid period")
    return sorted(set(days))


def cmd_predict(ctx: Context, args) -> int:
    ds = ctx.dataset()
    levels = ctx.levels(ds)
    pool = ctx.pool(levels)
    split = ctx.split(ds.spec.num_days)
    days = _parse_days(args.dates, ds, split)
    data = _prepared(ds, ctx, split)
    pred = predict_grid(pool, levels, data, days)
    dates = ds.spec.dates()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "date", "pred"])
    for r, c in np.argwhere(ds.mask.astype(bool)):
        for j, d in enumerate(days):
            w.writerow([int(r), int(c), dates[d].isoformat(), repr(float(pred[r, c, j]))])
    path = ctx.out / "predictions.csv"
    _write_text(path, buf.getvalue(), ctx)
    print(f"predictions for {len(days)} days x {int(ds.mask.sum())} road cells -> {path}")
    return 0


def evaluate_metrics(ds: Dataset, levels, pool, ctx: Context) -> dict:
    split = ctx.split(ds.spec.num_days)
    data = _prepared(ds, ctx, split)
    test = np.asarray(split.test)
    truth = ds.counts[:, :, test]
    pred = predict_grid(pool, levels, data, test)
    ha = np.repeat(historical_average(ds.counts[:, :, list(split.training_period)])[:, :, None], len(test), axis=2)
    lr = linear_regression_baseline(data, split.training_period, test, seed=ctx.cfg.split_seed)
    model_mse = mse_masked(pred, truth, ds.mask)
    ha_mse = mse_masked(ha, truth, ds.mask)
    return {
        "config_hash": ctx.cfg.hash(),
        "seed": ctx.seed,
        "levelmap_hash": array_hash(levels),
        "transfer": pool.transfer,
        "test_days": len(test),
        "road_cells": int(ds.mask.sum()),
        "overall_mse": model_mse,
        "baselines": {"historical_average": ha_mse, "linear_regression": mse_masked(lr, truth, ds.mask)},
        "improvement_over_ha_pct": 100.0 * (ha_mse - model_mse) / ha_mse if ha_mse else None,
        "per_level": per_level_table(levels, ds.mask, pred, ha, truth),
        "ablation": None,
    }


def cmd_evaluate(ctx: Context, args) -> int:
    ds = ctx.dataset()
    levels = ctx.levels(ds)
    pool = ctx.pool(levels)
    metrics = evaluate_metrics(ds, levels, pool, ctx)
    abl = ctx.out / "ablation.json"
    if abl.exists():
        metrics["ablation"] = ablation_block(json.loads(abl.read_text()))
    path = ctx.out / "metrics.json"
    _write_text(path, _json_text(metrics), ctx)
    print(
        f"test MSE {metrics['overall_mse']:.5f} vs historical average "
        f"{metrics['baselines']['historical_average']:.5f} -> {path}"
    )
    return 0


def ablation_block(report: dict) -> dict:
    return {
        "n_runs": report["n_runs"],
        "arms": {
            name: {
                "test_mse": arm["test_mse_summary"],
                "epochs_to_target": arm["epochs_summary"],
                "not_reached": len(arm["not_reached"]),
            }
            for name, arm in report["arms"].items()
        },
    }


def cmd_ablate(ctx: Context, args) -> int:
    ds = ctx.dataset()
    levels = ctx.levels(ds)
    split = ctx.split(ds.spec.num_days)
    data = _prepared(ds, ctx, split)
    runs = args.runs or ctx.cfg.ablation_runs
    report = ablation_transfer(levels, data, split, ctx.cfg.hyper, n_runs=runs)
    report.update({"config_hash": ctx.cfg.hash(), "seed": ctx.seed})
    _write_text(ctx.out / "ablation.json", _json_text(report), ctx)
    metrics_path = ctx.out / "metrics.json"
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text())
        metrics["ablation"] = ablation_block(report)
        _write_text(metrics_path, _json_text(metrics), ctx)
    for name, arm in report["arms"].items():
        e, m = arm["epochs_summary"], arm["test_mse_summary"]
        print(
            f"{name}: median epochs {e['median']:.2f} (mean {e['mean']:.2f}), "
            f"test MSE mean {m['mean']:.5f} variance {m['variance']:.3g}"
        )
    return 0


def format_report(metrics: dict) -> str:
    lines = []
    b = metrics["baselines"]
    lines.append("Overall masked test MSE")
    lines.append(f"{'dataset':<12}{'HA':>12}{'LR':>12}{'HintNet':>12}")
    lines.append(
        f"{'synthetic':<12}{b['historical_average']:>12.5f}{b['linear_regression']:>12.5f}{metrics['overall_mse']:>12.5f}"
    )
    lines.append("")
    lines.append("Per-level test MSE")
    lines.append(f"{'level':>6}{'cells':>8}{'HintNet':>12}{'HA':>12}{'improve %':>12}")
    total = 0
    for row in metrics["per_level"]:
        imp = "n/a" if row["improvement_pct"] is None else f"{row['improvement_pct']:.1f}"
        lines.append(f"{row['level']:>6}{row['cells']:>8}{row['model_mse']:>12.5f}{row['ha_mse']:>12.5f}{imp:>12}")
        total += row["cells"]
    lines.append(f"{'total':>6}{total:>8}")
    abl = metrics.get("ablation")
    if abl:
        lines.append("")
        lines.append(f"Transfer ablation ({abl['n_runs']} runs)")
        lines.append(f"{'arm':<18}{'med epochs':>12}{'mean epochs':>12}{'MSE mean':>12}{'MSE var':>12}")
        for name, arm in abl["arms"].items():
            e, m = arm["epochs_to_target"], arm["test_mse"]
            lines.append(f"{name:<18}{e['median']:>12.2f}{e['mean']:>12.2f}{m['mean']:>12.5f}{m['variance']:>12.3g}")
    return "\n".join(lines)


def cmd_report(ctx: Context, args) -> int:
    path = ctx.out / "metrics.json"
    if not path.exists():
        raise StageError(f"{path} not found; run `hintnet evaluate` first")
    print(format_report(json.loads(path.read_text())))
    return 0


def cmd_config(ctx: Context, args) -> int:
    sys.stdout.write(render_config(ctx.cfg))
    return 0


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic world into the data directory"),
    "ingest": (cmd_ingest, "grid the input CSVs into dataset.npz"),
    "partition": (cmd_partition, "multi-level risk partition -> levelmap.csv"),
    "train": (cmd_train, "train the per-level model pool"),
    "predict": (cmd_predict, "write predictions.csv for test days or --dates"),
    "evaluate": (cmd_evaluate, "write metrics.json on the test days"),
    "ablate": (cmd_ablate, "knowledge-transfer ablation over seeded runs"),
    "report": (cmd_report, "print summary tables from metrics.json"),
    "config": (cmd_config, "print the effective configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (synth: data directory)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = argparse.ArgumentParser(prog="hintnet", description="Hierarchical traffic-accident forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "partition":
            p.add_argument("--levels", choices=("csv", "geojson"), default="csv", help="also export GeoJSON")
        if name == "train":
            p.add_argument("--transfer", choices=("on", "off"), default="on")
        if name == "predict":
            p.add_argument("--dates", help="ISO dates or ranges, e.g. 2018-01-01:2018-01-31,2018-03-04")
        if name == "ablate":
            p.add_argument("--runs", type=int, help="override ablation_runs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        out = Path(args.out) if args.out and args.command != "synth" else cfg.path("out_dir")
        ctx = Context(cfg, out)
        return COMMANDS[args.command][0](ctx, args)
    except (ConfigError, StageError, TrainingDiverged, FileNotFoundError, ValueError, KeyError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"hintnet {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
