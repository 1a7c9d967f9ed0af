"""Link-prediction ranking, metrics, and the report files.

Ranking replaces one slot of a test triple with every entity, scores all
candidates, and ranks the true entity with ties counted half. Filtered mode
removes candidates that form another known triple. Local scope scores on the
owning client's tables, global scope on the server's entity table with the
owning client's relation rows.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .data import Triple
from .embeddings import EmbeddingTable, _check_norm

DIRECTIONS = ("head", "tail")
SCOPES = ("local", "global")
SPLITS = ("forget", "test")
METRIC_NAMES = ("mrr", "hits@1", "hits@3", "hits@10")

_ARM_ORDER = {"raw": 0, "retrained": 1, "unlearned": 2}
_SCOPE_ORDER = {"local": 0, "global": 1}
_SPLIT_ORDER = {"forget": 0, "test": 1}


class FilterIndex:
    """Known-triple lookup for filtered ranking."""

    def __init__(self, triples: Iterable[Triple] = ()):
        self._tails = defaultdict(set)
        self._heads = defaultdict(set)
        for h, r, t in triples:
            self._tails[(h, r)].add(t)
            self._heads[(r, t)].add(h)

    def tails(self, h: int, r: int) -> set:
        return self._tails.get((h, r), set())

    def heads(self, r: int, t: int) -> set:
        return self._heads.get((r, t), set())


def score_candidates(table: EmbeddingTable, triple: Triple, direction: str,
                     norm: str = "l1") -> np.ndarray:
    """Scores of every entity substituted into the chosen slot."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    h, r, t = triple
    if not (0 <= h < table.entity_count and 0 <= t < table.entity_count
            and 0 <= r < table.relation_count):
        raise ValueError(f"triple {tuple(triple)} indexes outside the tables")
    ents = table.entities
    rel = table.relations[r]
    if table.model_kind == "transe":
        _check_norm(norm)
        # both branches keep the (h + r) - t evaluation order so the rows are
        # bit-identical to scoring each candidate triple on its own
        if direction == "tail":
            v = (ents[h] + rel)[None, :] - ents
        else:
            v = (ents + rel[None, :]) - ents[t][None, :]
        if norm == "l1":
            return -np.abs(v).sum(axis=1)
        return -np.sqrt((v * v).sum(axis=1))
    m = table.dim // 2
    rr, ri = rel[:m], rel[m:]
    er, ei = ents[:, :m], ents[:, m:]
    if direction == "tail":
        hr, hi = ents[h, :m], ents[h, m:]
        return er @ (hr * rr - hi * ri) + ei @ (hr * ri + hi * rr)
    tr, ti = ents[t, :m], ents[t, m:]
    return er @ (rr * tr + ri * ti) + ei @ (rr * ti - ri * tr)


def rank_triple(table: EmbeddingTable, triple: Triple, direction: str,
                filter_index: Optional[FilterIndex] = None,
                norm: str = "l1") -> float:
    """Rank of the true entity; ties count half, filtered candidates drop out.

    rank = 1 + #{strictly higher} + #{equal, excluding the true entity}/2.
    """
    scores = score_candidates(table, triple, direction, norm)
    h, r, t = triple
    true_id = t if direction == "tail" else h
    s_true = scores[true_id]
    if filter_index is not None:
        known = filter_index.tails(h, r) if direction == "tail" else filter_index.heads(r, t)
        excluded = known - {true_id}
        if excluded:
            mask = np.zeros(scores.shape[0], dtype=bool)
            mask[list(excluded)] = True
            scores = scores[~mask]
    higher = int((scores > s_true).sum())
    equal = int((scores == s_true).sum()) - 1
    return 1.0 + higher + equal / 2.0


def mrr(ranks) -> float:
    arr = np.asarray(list(ranks), dtype=float)
    if arr.size == 0:
        raise ValueError("no ranks to average")
    return float((1.0 / arr).mean())


def hits_at_n(ranks, n: int) -> float:
    if n < 1:
        raise ValueError("n must be positive")
    arr = np.asarray(list(ranks), dtype=float)
    if arr.size == 0:
        raise ValueError("no ranks to average")
    return float((arr <= n).mean())


def compute_metrics(ranks) -> dict:
    arr = list(ranks)
    return {
        "mrr": mrr(arr),
        "hits@1": hits_at_n(arr, 1),
        "hits@3": hits_at_n(arr, 3),
        "hits@10": hits_at_n(arr, 10),
    }


@dataclass
class RankRecord:
    triple: Triple
    direction: str
    rank: float


@dataclass
class EvalSet:
    """Triples to rank against one scoring table."""

    table: EmbeddingTable
    triples: list


def evaluate(eval_sets, filter_index: Optional[FilterIndex] = None,
             norm: str = "l1"):
    """Rank every triple in both directions; returns (metrics, records)."""
    records = []
    for es in eval_sets:
        for trip in es.triples:
            for direction in DIRECTIONS:
                rk = rank_triple(es.table, trip, direction, filter_index, norm)
                records.append(RankRecord(trip, direction, rk))
    if not records:
        raise ValueError("evaluation sets contain no triples")
    metrics = compute_metrics([rec.rank for rec in records])
    return metrics, records


@dataclass
class ReportRow:
    arm: str
    scope: str
    split: str
    model: str
    metrics: dict = field(default_factory=dict)


def _row_key(row: ReportRow):
    return (_SCOPE_ORDER.get(row.scope, 99), row.scope,
            _ARM_ORDER.get(row.arm, 99), row.arm,
            _SPLIT_ORDER.get(row.split, 99), row.split,
            row.model)


CSV_HEADER = "arm,scope,split,model,metric,value"


def write_report_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in sorted(rows, key=_row_key):
            for metric in METRIC_NAMES:
                if metric in row.metrics:
                    fh.write(f"{row.arm},{row.scope},{row.split},{row.model},"
                             f"{metric},{row.metrics[metric]:.6f}\n")
    return path


def read_report_csv(path) -> list:
    """Rebuild ReportRows from a report.csv."""
    path = Path(path)
    rows: dict = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            arm, scope, split, model, metric, value = line.split(",")
            key = (arm, scope, split, model)
            row = rows.setdefault(key, ReportRow(arm, scope, split, model, {}))
            row.metrics[metric] = float(value)
    return sorted(rows.values(), key=_row_key)


def write_report_md(rows, path) -> Path:
    """Markdown table shaped like the usual results grid: local block, then global."""
    rows = sorted(rows, key=_row_key)
    models = sorted({r.model for r in rows})
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# Link prediction results\n\n")
        header = "| Variant |"
        rule = "| --- |"
        for m in models:
            header += f" {m} MRR | {m} Hits@1 |"
            rule += " --- | --- |"
        fh.write(header + "\n" + rule + "\n")
        grouped: dict = {}
        order = []
        for row in rows:
            key = (row.arm, row.scope, row.split)
            if key not in grouped:
                grouped[key] = {}
                order.append(key)
            grouped[key][row.model] = row.metrics
        for arm, scope, split in order:
            label = f"{arm.capitalize()} {scope} /{split}"
            cells = []
            for m in models:
                met = grouped[(arm, scope, split)].get(m)
                if met is None:
                    cells += ["", ""]
                else:
                    cells += [f"{100 * met['mrr']:.2f}%", f"{100 * met['hits@1']:.2f}%"]
            fh.write("| " + label + " | " + " | ".join(cells) + " |\n")
    return path
