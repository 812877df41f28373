"""Flat ``key = value`` experiment configuration.

Lines starting with ``#`` or ``;`` are comments. Every key is optional and
falls back to the default below; unknown keys and malformed values are
rejected with the offending line number. Relative paths resolve against the
directory holding the config file.
"""

from __future__ import annotations

import configparser
import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .grid import GridSpec
from .model import HyperParams
from .partition import MRSPParams

_SECTION = "hintnet"


def _opt_int(text: str):
    return None if text.lower() in ("", "none") else int(text)


# key -> (parser, default)
SCHEMA = {
    # data
    "data_dir": (str, "data"),
    "accidents": (str, "accidents.csv"),
    "roads": (str, "roads.csv"),
    "poi": (str, "poi.csv"),
    "stations": (str, "stations.csv"),
    "holidays": (str, "holidays.txt"),
    "out_dir": (str, "run"),
    # grid
    "rows": (int, 32),
    "cols": (int, 32),
    "cell_size_km": (float, 5.0),
    "origin_lat": (float, 41.0),
    "origin_lon": (float, -95.5),
    "time_start": (dt.date.fromisoformat, dt.date(2016, 1, 1)),
    "num_days": (int, 1095),
    "n_spec": (int, 10),
    "network_distance": (None, True),
    # partition
    "eta": (float, 1000.0),
    "eps": (int, 1),
    "min_points": (float, 10.0),
    "min_risk": (float, 0.0),
    "k": (int, 2),
    # model and training
    "w": (int, 5),
    "h": (int, 16),
    "h_l": (int, 32),
    "s_d": (int, 16),
    "lstm_input": (int, 32),
    "alpha": (float, 0.02),
    "momentum": (float, 0.0),
    "epochs": (int, 30),
    "batch_size": (int, 64),
    "patience": (int, 5),
    "max_train_samples": (_opt_int, 4000),
    "max_val_samples": (_opt_int, 2000),
    # evaluation
    "test_fraction": (float, 1.0 / 3.0),
    "val_fraction": (float, 0.2),
    "seed": (int, 0),
    "split_seed": (int, 0),
    "ablation_runs": (int, 10),
}


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})
    base_dir: Path = field(default_factory=Path.cwd)
    source: str | None = None

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        if key in ("accidents", "roads", "poi", "stations", "holidays") and not p.is_absolute():
            p = Path(self.values["data_dir"]) / p
        return p if p.is_absolute() else self.base_dir / p

    @property
    def grid(self) -> GridSpec:
        v = self.values
        return GridSpec(
            rows=v["rows"],
            cols=v["cols"],
            origin_lat=v["origin_lat"],
            origin_lon=v["origin_lon"],
            time_start=v["time_start"],
            num_days=v["num_days"],
            cell_size_km=v["cell_size_km"],
        )

    @property
    def mrsp(self) -> MRSPParams:
        v = self.values
        return MRSPParams(eta=v["eta"], eps=v["eps"], min_points=v["min_points"], min_risk=v["min_risk"])

    @property
    def hyper(self) -> HyperParams:
        keys = ("w", "h", "h_l", "s_d", "lstm_input", "alpha", "momentum", "epochs", "batch_size", "patience",
                "max_train_samples", "max_val_samples", "seed")
        return HyperParams(**{k: self.values[k] for k in keys})

    def with_overrides(self, **changes) -> "Config":
        values = dict(self.values)
        for k, v in changes.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            if v is not None:
                values[k] = v
        cfg = Config(values, self.base_dir, self.source)
        cfg.validate()
        return cfg

    def canonical(self) -> dict:
        return {k: (v.isoformat() if isinstance(v, dt.date) else v) for k, v in sorted(self.values.items())}

    def hash(self) -> str:
        """Digest of every setting that influences numerical results (paths excluded)."""
        skip = {"data_dir", "accidents", "roads", "poi", "stations", "holidays", "out_dir"}
        payload = {k: v for k, v in self.canonical().items() if k not in skip}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        v = self.values
        try:
            self.grid
            self.mrsp
            self.hyper
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if v["k"] < 1:
            raise ConfigError("k must be >= 1")
        if not 0 < v["test_fraction"] < 1 or not 0 < v["val_fraction"] < 1:
            raise ConfigError("test_fraction and val_fraction must lie in (0, 1)")
        if v["n_spec"] < 1 or v["ablation_runs"] < 1:
            raise ConfigError("n_spec and ablation_runs must be >= 1")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _key_lines(text: str) -> dict[str, int]:
    lines = {}
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
        if m:
            lines.setdefault(m.group(1).strip().lower(), i)
    return lines


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> Config:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=source)
    except configparser.DuplicateOptionError as exc:
        # line numbers are shifted by one for the synthetic section header
        raise ConfigError(f"{source}:{exc.lineno - 1}: duplicate key {exc.option!r}") from None
    except configparser.Error as exc:
        msg = re.sub(r"line\s+(\d+)", lambda m: f"line {int(m.group(1)) - 1}", str(exc))
        raise ConfigError(f"{source}: {msg}") from None
    where = _key_lines(text)
    cfg = Config(base_dir=base_dir or Path.cwd(), source=source)
    for key, raw in parser.items(_SECTION):
        line = where.get(key, 0)
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{line}: unknown key {key!r}")
        conv = SCHEMA[key][0]
        try:
            cfg.values[key] = _parse_bool(raw) if conv is None else conv(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{line}: bad value for {key!r}: {exc}") from None
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path), path.resolve().parent)


def render_config(cfg: Config) -> str:
    lines = ["# hintnet experiment configuration"]
    for k, v in cfg.canonical().items():
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
