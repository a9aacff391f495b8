"""Sweep orchestration: build the federation, train each cell, write results.

Output layout under the experiment directory::

    config.ini        validated, fully expanded config
    manifest.json     config hash, seeds, cell list, failures
    summary.csv       one row per (algorithm, eta, lambda, seed) cell
    cells/<tag>.json  per-client metrics for the cell
    logs/<tag>.jsonl  round logs (when output.round_logs is on)

Nothing written depends on wall-clock time, so a re-run of the same config
produces identical files.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import ExperimentConfig
from .data import (
    ClientDataset,
    CsvSchema,
    load_csv,
    load_embeddings,
    mirrored_counts,
    partition,
    partition_fixed,
    synth_gaussian,
    train_test_split,
)
from .fedengine import FairFLConfig, FederationState, evaluate, train
from .metrics import SummaryRow, summarize
from .numerics import Rng

log = logging.getLogger(__name__)

# random streams for data construction; training uses its own streams
STREAM_POOL = 10
STREAM_PARTITION = 11
STREAM_TEST_POOL = 12
STREAM_TEST_PARTITION = 13
STREAM_SPLIT = 14

CSV_COLUMNS = ["algorithm", "eta", "lambda", "seed", "worst_err", "worst_ddp", "avg_err", "avg_ddp", "clients"]


@dataclass
class Federation:
    train: list[ClientDataset]
    test: list[ClientDataset]


def _load_pool(cfg: ExperimentConfig, path: str, stats=None):
    if cfg.data.source == "csv":
        schema = CsvSchema(list(cfg.data.features) or None, cfg.data.s_column, cfg.data.y_column)
        return load_csv(path, schema, stats)
    return load_embeddings(path), None


def build_federation(cfg: ExperimentConfig, seed: int) -> Federation:
    """Train shards follow the partition spec; test shards mirror their group counts."""
    if cfg.data.source == "synth":
        spec = cfg.data.synth_spec()
        pool = synth_gaussian(spec, Rng(seed, STREAM_POOL))
        test_pool = synth_gaussian(spec, Rng(seed, STREAM_TEST_POOL))
    else:
        pool, stats = _load_pool(cfg, cfg.data.path)
        if cfg.data.test_path:
            test_pool, _ = _load_pool(cfg, cfg.data.test_path, stats)
        else:
            pool, test_pool = train_test_split(pool, cfg.data.test_fraction, Rng(seed, STREAM_SPLIT))
    shards = partition(pool, cfg.partition, Rng(seed, STREAM_PARTITION))
    tests = partition_fixed(test_pool, mirrored_counts(shards, cfg.test_scale), Rng(seed, STREAM_TEST_PARTITION))
    return Federation(shards, tests)


def cell_tag(algorithm: str, eta: float, lam: float, seed: int) -> str:
    return f"{algorithm}_eta{eta:g}_lam{lam:g}_seed{seed}"


def cell_config(cfg: ExperimentConfig, algorithm: str, eta: float, lam: float, seed: int) -> FairFLConfig:
    return cfg.train.with_(algorithm=algorithm, eta=eta, lam=lam, seed=seed)


def run_cell(fed: Federation, fl: FairFLConfig, log_path=None) -> tuple[SummaryRow, FederationState]:
    state, _ = train(fed.train, fl, log_path=log_path)
    records = evaluate(state, fed.test, fl)
    return summarize(records, fl.algorithm, fl.fairness.eta, fl.lam, fl.seed), state


def emit_tradeoff_csv(rows: Sequence[SummaryRow], path) -> None:
    """Stable columns, rows sorted by ``(algorithm, eta, lambda, seed)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in sorted(rows, key=lambda r: r.key()):
            w.writerow([
                r.algorithm, repr(float(r.eta)), repr(float(r.lam)), r.seed,
                repr(r.worst_err), repr(r.worst_ddp), repr(r.avg_err), repr(r.avg_ddp),
                f"cells/{cell_tag(*r.key())}.json",
            ])


def read_tradeoff_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[SummaryRow]:
    """Run every sweep cell; a failing cell is logged and skipped."""
    out = Path(out_dir or cfg.out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    if cfg.round_logs:
        (out / "logs").mkdir(exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())

    feds: dict[int, Federation | Exception] = {}
    for seed in sorted(set(cfg.sweep.seeds)):
        try:
            feds[seed] = build_federation(cfg, seed)
        except Exception as exc:  # noqa: BLE001 - isolate per seed
            log.error("seed %d: data construction failed: %s", seed, exc)
            feds[seed] = exc

    def work(cell):
        algorithm, eta, lam, seed = cell
        tag = cell_tag(*cell)
        fed = feds[seed]
        if isinstance(fed, Exception):
            return cell, None, f"data: {fed}"
        try:
            fl = cell_config(cfg, algorithm, eta, lam, seed)
            log_path = out / "logs" / f"{tag}.jsonl" if cfg.round_logs else None
            row, _ = run_cell(fed, fl, log_path)
        except Exception as exc:  # noqa: BLE001 - isolate per cell
            log.error("cell %s failed: %s", tag, exc)
            return cell, None, f"{type(exc).__name__}: {exc}"
        (out / "cells" / f"{tag}.json").write_text(json.dumps(row.to_dict(), sort_keys=True, indent=1))
        return cell, row, None

    cells = cfg.cells()
    if cfg.sweep.parallel_cells and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=max(1, cfg.train.workers)) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]

    rows = [row for _, row, _ in results if row is not None]
    failures = {cell_tag(*cell): err for cell, _, err in results if err is not None}
    emit_tradeoff_csv(rows, out / "summary.csv")
    manifest = {
        "config_sha256": cfg.digest(),
        "seeds": sorted(set(cfg.sweep.seeds)),
        "cells": [cell_tag(*c) for c in cells],
        "failed": failures,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return sorted(rows, key=lambda r: r.key())
