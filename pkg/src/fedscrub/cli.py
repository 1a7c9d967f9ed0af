"""Command-line interface: partition, run, eval, report."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_synthetic_spec
from .data import (KnowledgeGraph, generate_synthetic_kg, load_triples,
                   save_triples, write_partition)
from .evaluation import (EvalSet, FilterIndex, ReportRow, evaluate,
                         read_report_csv, write_report_csv, write_report_md)
from .embeddings import EmbeddingTable
from .federation import ARMS
from .pipeline import (ModelSnapshot, derive_clients, load_snapshot, run_raw,
                       run_retrained, run_unlearned)
from .rng import SYNTH, derive_rng

log = logging.getLogger(__name__)

RUN_DIR_ENV = "FEDDM_RUN_DIR"


def resolve_run_root(cfg_run_dir: str, flag_value=None) -> Path:
    """Precedence: explicit --run-dir flag, then the env var, then the config."""
    if flag_value:
        return Path(flag_value)
    env = os.environ.get(RUN_DIR_ENV)
    if env:
        return Path(env)
    return Path(cfg_run_dir)


def _load_dataset(train_path: str, test_path: str):
    """Load train and test with one shared id space (train ids first)."""
    train = load_triples(train_path)
    test = load_triples(test_path, train.entity_vocab, train.relation_vocab)
    return train, test


def _prepare_data(cfg: RunConfig, run_root: Path):
    """Resolve the dataset, generating and persisting a synthetic one if asked."""
    if cfg.synthetic:
        spec = parse_synthetic_spec(cfg.synthetic)
        train, test = generate_synthetic_kg(
            spec["entities"], spec["relations"], spec["triples"],
            test_triples=spec["test"], seed=derive_rng(cfg.seed, SYNTH))
        data_dir = run_root / "data"
        data_dir.mkdir(parents=True, exist_ok=True)
        train_path = data_dir / "train.txt"
        test_path = data_dir / "test.txt"
        save_triples(train, train_path)
        save_triples(test, test_path)
        cfg.train_path = str(train_path.resolve())
        cfg.test_path = str(test_path.resolve())
        cfg.synthetic = ""
    if not cfg.train_path or not cfg.test_path:
        raise ConfigError("run needs train_path and test_path (or synthetic=...)")
    return _load_dataset(cfg.train_path, cfg.test_path)


def cmd_partition(args) -> int:
    kg = load_triples(args.input)
    paths = write_partition(kg, args.clients, args.seed, args.out)
    print(f"wrote {len(paths)} client files and manifest under {args.out}")
    return 0


def _overrides_from(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val
    for name in ("seed", "rounds", "arms", "threads", "synthetic"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if getattr(args, "train", None):
        overrides["train_path"] = args.train
    if getattr(args, "test", None):
        overrides["test_path"] = args.test
    return overrides


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides_from(args))
    run_root = resolve_run_root(cfg.run_dir, args.run_dir)
    run_root.mkdir(parents=True, exist_ok=True)
    train_kg, test_kg = _prepare_data(cfg, run_root)
    del test_kg  # loaded to extend the shared vocab before any table is sized

    requested = cfg.arm_list()
    for arm in ARMS:
        if arm not in requested:
            continue
        workdir = run_root / arm / str(cfg.seed)
        workdir.mkdir(parents=True, exist_ok=True)
        if args.config:
            shutil.copyfile(args.config, workdir / "config.txt")
        cfg.dump(workdir / "config_resolved.txt")
        plan = cfg.to_plan(arm)
        print(f"[{arm}] seed {cfg.seed}: training...", flush=True)
        if arm == "raw":
            run_raw(train_kg, plan, workdir, threads=cfg.threads)
        elif arm == "retrained":
            run_retrained(train_kg, plan, workdir, threads=cfg.threads)
        else:
            raw_dir = run_root / "raw" / str(cfg.seed) / "snapshot"
            if not (raw_dir / "provenance.txt").exists():
                raise ConfigError(
                    f"the unlearned arm needs a raw snapshot at {raw_dir}; "
                    f"run the raw arm first")
            raw_snap = load_snapshot(raw_dir)
            run_unlearned(train_kg, plan, raw_snap, workdir, threads=cfg.threads)
        print(f"[{arm}] seed {cfg.seed}: done, snapshot at {workdir / 'snapshot'}")
    return 0


def _client_relation_matrix(snap: ModelSnapshot, cid: int, n_relations: int) -> np.ndarray:
    full = np.zeros((n_relations, snap.dim))
    full[snap.relation_maps[cid]] = snap.client_relations[cid]
    return full


def _snapshot_rows(arm: str, seed_dir: Path) -> list:
    """Metric rows for one (arm, seed) run directory."""
    cfg = load_config(seed_dir / "config_resolved.txt")
    train_kg, test_kg = _load_dataset(cfg.train_path, cfg.test_path)
    snap = load_snapshot(seed_dir / "snapshot")
    plan = cfg.to_plan(arm)
    specs = derive_clients(train_kg, plan)
    if snap.n_clients != len(specs):
        raise ConfigError(f"{seed_dir}: snapshot client count does not match config")

    n_ent, n_rel = train_kg.n_entities, train_kg.n_relations
    owner = np.full(n_rel, -1, dtype=int)
    for spec in specs:
        owner[spec.owned_relations] = spec.client_id
    test_by_client: dict = {spec.client_id: [] for spec in specs}
    for trip in test_kg.triples:
        test_by_client[int(owner[trip.relation])].append(trip)

    filter_index = None
    if cfg.filtered_eval:
        filter_index = FilterIndex(list(train_kg.triples) + list(test_kg.triples))

    rows = []
    for scope in ("local", "global"):
        tables = []
        for spec in specs:
            cid = spec.client_id
            if not np.array_equal(snap.entity_maps[cid], np.arange(n_ent)):
                raise ConfigError(
                    f"{seed_dir}: client {cid} does not cover the entity "
                    f"vocabulary; local ranking is undefined")
            rel_full = _client_relation_matrix(snap, cid, n_rel)
            ents = snap.client_entities[cid] if scope == "local" else snap.global_entities
            tables.append(EmbeddingTable(ents, rel_full, snap.model_kind))
        for split in ("forget", "test"):
            sets = []
            for spec in specs:
                trips = spec.forget.forget if split == "forget" \
                    else test_by_client[spec.client_id]
                if trips:
                    sets.append(EvalSet(tables[spec.client_id], trips))
            if not sets:
                log.warning("%s/%s: no triples to evaluate", scope, split)
                continue
            metrics, _ = evaluate(sets, filter_index, cfg.transe_norm)
            rows.append(ReportRow(arm, scope, split, cfg.model, metrics))
    return rows


def evaluate_run_root(run_root: Path) -> list:
    """Rows for every arm/seed under a run root; metrics are per-seed medians."""
    run_root = Path(run_root)
    collected: dict = {}
    found = False
    for arm in ARMS:
        arm_dir = run_root / arm
        if not arm_dir.is_dir():
            continue
        for seed_dir in sorted(arm_dir.iterdir()):
            if not (seed_dir / "snapshot" / "provenance.txt").exists():
                continue
            found = True
            for row in _snapshot_rows(arm, seed_dir):
                key = (row.arm, row.scope, row.split, row.model)
                collected.setdefault(key, []).append(row.metrics)
    if not found:
        raise ConfigError(f"no snapshots found under {run_root}")
    rows = []
    for (arm, scope, split, model), metric_dicts in collected.items():
        merged = {name: float(np.median([m[name] for m in metric_dicts]))
                  for name in metric_dicts[0]}
        rows.append(ReportRow(arm, scope, split, model, merged))
    return rows


def _render_all(rows, run_root: Path) -> list:
    from . import figures  # defer matplotlib import to the commands that draw

    paths = [write_report_csv(rows, run_root / "report.csv"),
             write_report_md(rows, run_root / "report.md")]
    paths.append(figures.render_metric_figure(rows, run_root / "report_mrr.png", "mrr"))
    paths.append(figures.render_metric_figure(rows, run_root / "report_hits1.png", "hits@1"))
    arm_logs = {}
    for arm in ARMS:
        arm_dir = run_root / arm
        if not arm_dir.is_dir():
            continue
        for seed_dir in sorted(arm_dir.iterdir()):
            log_path = seed_dir / "rounds.csv"
            if log_path.exists():
                arm_logs[arm] = figures.read_round_log(log_path)
                break
    if arm_logs:
        paths.append(figures.render_loss_figure(arm_logs, run_root / "training_loss.png"))
    return paths


def cmd_eval(args) -> int:
    run_root = resolve_run_root("runs", args.run_dir)
    rows = evaluate_run_root(run_root)
    paths = _render_all(rows, run_root)
    for row in rows:
        print(f"{row.arm:10s} {row.scope:6s} {row.split:6s} "
              f"mrr={row.metrics['mrr']:.4f} hits@1={row.metrics['hits@1']:.4f}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_report(args) -> int:
    run_root = resolve_run_root("runs", args.run_dir)
    csv_path = run_root / "report.csv"
    if not csv_path.exists():
        raise ConfigError(f"no report.csv under {run_root}; run eval first")
    rows = read_report_csv(csv_path)
    paths = _render_all(rows, run_root)
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedscrub",
        description="Federated KG embedding training with diffusion-based unlearning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="split a triple file across clients by relation")
    p.add_argument("--input", required=True, help="tab-separated triple file")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="train one or more arms")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--arms", help="comma list from raw,retrained,unlearned")
    p.add_argument("--threads", type=int)
    p.add_argument("--train", help="train triple file")
    p.add_argument("--test", help="test triple file")
    p.add_argument("--synthetic", nargs="?", const="entities=200,relations=10,triples=2000",
                   help="generate a bundled synthetic dataset instead of loading files")
    p.add_argument("--run-dir", help=f"output root (overrides ${RUN_DIR_ENV} and config)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="rank test and forget triples, write the report")
    p.add_argument("--run-dir", help="run root holding <arm>/<seed> directories")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="re-render report.md and figures from report.csv")
    p.add_argument("--run-dir", help="run root holding report.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
