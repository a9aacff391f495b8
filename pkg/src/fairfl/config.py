"""Experiment configuration as a sectioned INI document.

Every key is declared in ``SCHEMA``; anything else is rejected before any
compute happens.  Blank values mean "use the default".

Example::

    [data]
    source = synth
    d = 5
    p_y1_given_s0 = 0.7
    p_y1_given_s1 = 0.3

    [partition]
    mode = fixed
    counts = 400:100, 100:400, 100:400, 100:400, 100:400

    [train]
    algorithm = pfedfair
    rounds = 30
    eta = 0.9

    [sweep]
    algorithms = fedavg, pfedfair
    etas = 0, 0.9
    seeds = 0, 1, 2

    [output]
    dir = runs/demo
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import PartitionSpec, SynthSpec
from .fairness import FairnessPenaltyConfig
from .fedengine import ALGORITHMS, FairFLConfig


class ConfigError(ValueError):
    pass


def _floats(raw: str) -> list[float]:
    return [float(t) for t in raw.replace(";", ",").split(",") if t.strip()]


def _ints(raw: str) -> list[int]:
    return [int(t) for t in raw.replace(";", ",").split(",") if t.strip()]


def _strs(raw: str) -> list[str]:
    return [t.strip() for t in raw.split(",") if t.strip()]


def _counts(raw: str) -> list[tuple[int, int]]:
    out = []
    for tok in _strs(raw):
        a, sep, b = tok.partition(":")
        if not sep:
            raise ValueError(f"count pair {tok!r} must look like n0:n1")
        out.append((int(a), int(b)))
    return out


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{a}:{b}" for a, b in value)
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "source": (str, "synth"),
        "d": (int, 5),
        "label_sep": (float, 2.0),
        "attr_sep": (float, 3.0),
        "sigma": (float, 1.0),
        "p_s1": (float, 0.5),
        "p_y1_given_s0": (float, 0.7),
        "p_y1_given_s1": (float, 0.3),
        "pool_size": (int, 40000),
        "path": (str, ""),
        "test_path": (str, ""),
        "features": (_strs, []),
        "s_column": (str, "s"),
        "y_column": (str, "y"),
        "test_fraction": (float, 0.2),
    },
    "partition": {
        "mode": (str, "fixed"),
        "counts": (_counts, [(400, 100)] + [(100, 400)] * 4),
        "clients": (int, 0),
        "alpha_under": (float, 0.5),
        "alpha_over": (float, 1.0),
        "fraction_under": (float, 0.2),
        "samples_per_client": (int, 0),
        "under_ratio": (float, 0.2),
        "over_ratio": (float, 0.8),
        "test_scale": (float, 1.0),
    },
    "train": {
        "algorithm": (str, "pfedfair"),
        "rounds": (int, 50),
        "outer_lr": (float, 0.5),
        "inner_steps": (int, 10),
        "inner_lr": (float, 0.05),
        "lam": (float, 0.4),
        "gamma": (float, 1.0),
        "eta": (float, 0.0),
        "bandwidth_h": (float, 0.1),
        "arch": (str, "linear"),
        "hidden": (_ints, []),
        "inner_objective": (str, "fair"),
        "participation": (float, 1.0),
        "workers": (int, 1),
    },
    "sweep": {
        "algorithms": (_strs, []),
        "etas": (_floats, []),
        "lambdas": (_floats, []),
        "seeds": (_ints, [0]),
        "parallel_cells": (_bool, False),
    },
    "output": {
        "dir": (str, "fairfl-out"),
        "round_logs": (_bool, True),
    },
}


@dataclass(frozen=True)
class DataSource:
    source: str = "synth"
    d: int = 5
    label_sep: float = 2.0
    attr_sep: float = 3.0
    sigma: float = 1.0
    p_s1: float = 0.5
    p_y1_given_s0: float = 0.7
    p_y1_given_s1: float = 0.3
    pool_size: int = 40000
    path: str = ""
    test_path: str = ""
    features: tuple[str, ...] = ()
    s_column: str = "s"
    y_column: str = "y"
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("synth", "csv", "embeddings"):
            raise ConfigError(f"data.source must be synth, csv or embeddings, got {self.source!r}")
        if self.source != "synth" and not self.path:
            raise ConfigError(f"data.path is required for source={self.source}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
        object.__setattr__(self, "features", tuple(self.features))
        if self.source == "synth":
            self.synth_spec()  # validates

    def synth_spec(self, n: int | None = None) -> SynthSpec:
        try:
            return SynthSpec.from_separations(
                self.d, self.label_sep, self.attr_sep, sigma=self.sigma, p_s1=self.p_s1,
                p_y1_given_s=(self.p_y1_given_s0, self.p_y1_given_s1),
                n=self.pool_size if n is None else n,
            )
        except ValueError as exc:
            raise ConfigError(f"[data] {exc}") from exc


@dataclass(frozen=True)
class SweepAxes:
    algorithms: tuple[str, ...]
    etas: tuple[float, ...]
    lambdas: tuple[float, ...]
    seeds: tuple[int, ...]
    parallel_cells: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSource
    partition: PartitionSpec
    train: FairFLConfig
    sweep: SweepAxes
    out_dir: str = "fairfl-out"
    round_logs: bool = True
    test_scale: float = 1.0
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def cells(self) -> list[tuple[str, float, float, int]]:
        """Sorted ``(algorithm, eta, lambda, seed)`` grid."""
        return sorted(
            (a, e, l, s)
            for a in self.sweep.algorithms
            for e in self.sweep.etas
            for l in self.sweep.lambdas
            for s in self.sweep.seeds
        )

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in SCHEMA.items():
            cp[section] = {k: _fmt(self.raw[section][k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        """Hash of the expanded config; the output directory is left out."""
        raw = {**self.raw, "output": {**self.raw["output"], "dir": ""}}
        return hashlib.sha256(replace(self, raw=raw).to_ini().encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Re-validate with ``section.key`` overrides, e.g. ``{"train.rounds": 5}``."""
        raw = {s: dict(v) for s, v in self.raw.items()}
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {dotted!r}")
            raw[section][key] = value
        return _build(raw)


def _parse(cp: configparser.ConfigParser) -> dict:
    raw = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        values = {}
        present = cp[section] if cp.has_section(section) else {}
        for key in present:
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
        for key, (conv, default) in keys.items():
            text = present.get(key, "") if present else ""
            if text is None or not str(text).strip():
                values[key] = list(default) if isinstance(default, list) else default
                continue
            try:
                values[key] = conv(str(text).strip())
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        raw[section] = values
    return raw


def _build(raw: dict) -> ExperimentConfig:
    d, p, t, s, o = (raw[k] for k in ("data", "partition", "train", "sweep", "output"))
    try:
        data = DataSource(**{**d, "features": tuple(d["features"])})
        part = PartitionSpec(
            mode=p["mode"], counts=list(p["counts"]), clients=p["clients"],
            alpha_under=p["alpha_under"], alpha_over=p["alpha_over"],
            fraction_under=p["fraction_under"], samples_per_client=p["samples_per_client"],
            under_ratio=p["under_ratio"], over_ratio=p["over_ratio"],
        )
        if p["test_scale"] <= 0:
            raise ConfigError("partition.test_scale must be positive")
        train = FairFLConfig(
            algorithm=t["algorithm"], rounds=t["rounds"], outer_lr=t["outer_lr"],
            inner_steps=t["inner_steps"], inner_lr=t["inner_lr"], lam=t["lam"], gamma=t["gamma"],
            fairness=FairnessPenaltyConfig(t["eta"], t["bandwidth_h"]), arch=t["arch"],
            hidden=tuple(t["hidden"]), inner_objective=t["inner_objective"],
            participation=t["participation"], workers=t["workers"],
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    algorithms = tuple(s["algorithms"]) or (train.algorithm,)
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ConfigError(f"sweep.algorithms: unknown algorithm {a!r}")
    etas = tuple(s["etas"]) or (train.fairness.eta,)
    lambdas = tuple(s["lambdas"]) or (train.lam,)
    if any(e < 0 for e in etas) or any(l < 0 for l in lambdas):
        raise ConfigError("sweep values must be non-negative")
    if not s["seeds"]:
        raise ConfigError("sweep.seeds must list at least one seed")
    sweep = SweepAxes(algorithms, etas, lambdas, tuple(s["seeds"]), s["parallel_cells"])
    return ExperimentConfig(data, part, train, sweep, o["dir"], o["round_logs"], p["test_scale"], raw)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return _build(_parse(cp))


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def default_config() -> ExperimentConfig:
    return parse_config("")
