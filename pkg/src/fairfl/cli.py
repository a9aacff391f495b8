"""Command-line entry point: ``fairfl <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, config, data or
instance), 2 runtime failure (divergence, I/O, failed sweep cells).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import oracle
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .data import synth_gaussian, write_csv, write_embeddings
from .experiment import (
    STREAM_POOL,
    build_federation,
    cell_config,
    cell_tag,
    emit_tradeoff_csv,
    run_cell,
    run_experiment,
)
from .fedengine import ALGORITHMS, FederationState, evaluate
from .metrics import summarize
from .model import load_params, save_params
from .numerics import Rng

log = logging.getLogger("fairfl")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_run_flags(p, rounds=True):
    p.add_argument("--config", help="experiment config (INI); defaults are used when omitted")
    p.add_argument("--seed", type=int, help="master seed; overrides the sweep seed list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--eta", type=float, help="fairness penalty weight")
    p.add_argument("--lambda", dest="lam", type=float, help="personalization mixing weight")
    if rounds:
        p.add_argument("--rounds", type=int, help="communication rounds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairfl", description="Fair personalized federated learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic pool to CSV or embedding binary")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="*.csv or *.emb")
    p.add_argument("--n", type=int, help="pool size (default: data.pool_size)")

    p = sub.add_parser("partition", help="write per-client train/test CSV shards")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one cell and save checkpoints")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="evaluate checkpoints written by train")
    _add_run_flags(p, rounds=False)
    p.add_argument("--checkpoints", help="directory holding *.ffl files (default: --out)")

    p = sub.add_parser("sweep", help="run the full (algorithm, eta, lambda, seed) grid")
    _add_run_flags(p)

    p = sub.add_parser("oracle", help="fair-optimal rule and gap bound on a discrete instance")
    p.add_argument("--instance", required=True, help="JSON instance or {\"clients\": [...]} family")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--grid-n", type=int, default=101)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    over = {}
    if getattr(args, "rounds", None) is not None:
        over["train.rounds"] = args.rounds
    if getattr(args, "algorithm", None):
        over["train.algorithm"] = args.algorithm
        over["sweep.algorithms"] = [args.algorithm]
    if getattr(args, "eta", None) is not None:
        over["train.eta"] = args.eta
        over["sweep.etas"] = [args.eta]
    if getattr(args, "lam", None) is not None:
        over["train.lam"] = args.lam
        over["sweep.lambdas"] = [args.lam]
    if getattr(args, "seed", None) is not None:
        over["sweep.seeds"] = [args.seed]
    if getattr(args, "out", None):
        over["output.dir"] = args.out
    return cfg.with_overrides(over) if over else cfg


def _single_cell(cfg: ExperimentConfig):
    seed = cfg.sweep.seeds[0]
    fl = cell_config(cfg, cfg.train.algorithm, cfg.train.fairness.eta, cfg.train.lam, seed)
    return seed, fl


def cmd_gen_synth(args) -> int:
    cfg = load_config(args.config) if args.config else default_config()
    data = synth_gaussian(cfg.data.synth_spec(args.n), Rng(args.seed, STREAM_POOL))
    if args.out.endswith(".emb"):
        write_embeddings(args.out, data)
    else:
        write_csv(args.out, data)
    print(json.dumps({"path": args.out, "n": len(data), "d": data.dim}))
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = load_config(args.config) if args.config else default_config()
    fed = build_federation(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tr, te in zip(fed.train, fed.test):
        write_csv(out / f"client{tr.client_id}_train.csv", tr)
        write_csv(out / f"client{te.client_id}_test.csv", te)
    counts = {str(c.client_id): {"train": c.group_counts(), "test": t.group_counts()}
              for c, t in zip(fed.train, fed.test)}
    (out / "partition.json").write_text(json.dumps(counts, indent=1, sort_keys=True))
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    seed, fl = _single_cell(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    tag = cell_tag(fl.algorithm, fl.fairness.eta, fl.lam, seed)
    fed = build_federation(cfg, seed)
    row, state = run_cell(fed, fl, out / f"{tag}.jsonl" if cfg.round_logs else None)
    save_params(out / "global.ffl", state.global_w)
    for cid, p in zip(state.client_ids, state.personalized):
        save_params(out / f"client{cid}.ffl", p)
    emit_tradeoff_csv([row], out / "summary.csv")
    (out / "cells").mkdir(exist_ok=True)
    (out / "cells" / f"{tag}.json").write_text(json.dumps(row.to_dict(), sort_keys=True, indent=1))
    print(json.dumps({k: v for k, v in row.to_dict().items() if k != "records"}, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    seed, fl = _single_cell(cfg)
    ckpt = Path(args.checkpoints or cfg.out_dir)
    fed = build_federation(cfg, seed)
    ids = sorted(c.client_id for c in fed.test)
    try:
        glob = load_params(ckpt / "global.ffl")
        personal = [glob if fl.algorithm == "fedavg" else load_params(ckpt / f"client{cid}.ffl") for cid in ids]
    except FileNotFoundError as exc:
        raise ConfigError(f"missing checkpoint: {exc.filename}") from exc
    state = FederationState(glob, personal, ids)
    row = summarize(evaluate(state, fed.test, fl), fl.algorithm, fl.fairness.eta, fl.lam, seed)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        emit_tradeoff_csv([row], Path(args.out) / "evaluation.csv")
    print(json.dumps(row.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = run_experiment(cfg)
    n_cells = len(cfg.cells())
    print(json.dumps({"out": cfg.out_dir, "cells": n_cells, "succeeded": len(rows)}))
    return EXIT_OK if len(rows) == n_cells else EXIT_RUNTIME


def oracle_report(instances, epsilon: float, grid_n: int) -> dict:
    report = {"clients": []}
    for inst in instances:
        opt = oracle.fair_optimum_grid(inst, epsilon, grid_n)
        bayes = oracle.bayes_rule(inst)
        entry = {
            "fair_optimum": opt.to_json(),
            "bayes_risk": oracle.rule_risk(inst, bayes),
            "bayes_undefined_cells": [list(c) for c in bayes.undefined],
        }
        if inst.is_deterministic():
            closed = oracle.fair_optimal_risk_closed_form(inst)
            entry["closed_form_risk"] = closed
            if epsilon == 0:
                entry["closed_form_match"] = bool(abs(closed - opt.risk) <= 2.0 / grid_n)
        report["clients"].append(entry)
    if len(instances) > 1:
        report["gap_bound"] = oracle.personalization_gap_bound(instances, grid_n=max(grid_n, 11)).to_json()
    return report


def cmd_oracle(args) -> int:
    try:
        instances = oracle.load_instances(args.instance)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read instance: {exc}") from exc
    print(json.dumps(oracle_report(instances, args.epsilon, args.grid_n), indent=1, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "partition": cmd_partition,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValueError as exc:  # ConfigError, DataError and instance validation
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
