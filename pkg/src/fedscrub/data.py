"""Triple files, vocabularies, relation partitioning, and forget splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .rng import SeedLike, as_rng


class TripleFileError(ValueError):
    """Malformed or empty triple file."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Bidirectional name <-> dense-id map, ids in first-appearance order."""

    def __init__(self, names: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._names: list[str] = []
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id_of(self, name: str) -> int:
        return self._ids[name]

    def name_of(self, idx: int) -> str:
        return self._names[idx]

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    @property
    def names(self) -> list[str]:
        return list(self._names)


@dataclass
class KnowledgeGraph:
    """Integer-encoded triples plus the shared vocabularies they index."""

    triples: list
    entity_vocab: Vocab
    relation_vocab: Vocab

    @property
    def n_entities(self) -> int:
        return len(self.entity_vocab)

    @property
    def n_relations(self) -> int:
        return len(self.relation_vocab)

    def __len__(self) -> int:
        return len(self.triples)


@dataclass
class ForgetSplit:
    """Disjoint forget/remaining halves of one client's triples."""

    forget: list
    remaining: list


def load_triples(path, entity_vocab: Optional[Vocab] = None,
                 relation_vocab: Optional[Vocab] = None) -> KnowledgeGraph:
    """Read a head<TAB>relation<TAB>tail file.

    Duplicate lines are dropped (first occurrence wins). Pass existing vocabs
    to share id spaces across files, e.g. train and test splits.
    """
    path = Path(path)
    ents = entity_vocab if entity_vocab is not None else Vocab()
    rels = relation_vocab if relation_vocab is not None else Vocab()
    triples: list[Triple] = []
    seen: set[Triple] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3 or any(f == "" for f in fields):
                raise TripleFileError(
                    f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, "
                    f"got {len(fields)} field(s)")
            h, r, t = fields
            trip = Triple(ents.add(h), rels.add(r), ents.add(t))
            if trip not in seen:
                seen.add(trip)
                triples.append(trip)
    if not triples:
        raise TripleFileError(f"{path}: no triples found")
    return KnowledgeGraph(triples, ents, rels)


def save_triples(kg: KnowledgeGraph, path, triples=None) -> None:
    """Write triples (default: all of kg) back to the tab-separated format."""
    rows = kg.triples if triples is None else triples
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in rows:
            fh.write(f"{kg.entity_vocab.name_of(h)}\t"
                     f"{kg.relation_vocab.name_of(r)}\t"
                     f"{kg.entity_vocab.name_of(t)}\n")


def relation_assignments(n_relations: int, n_clients: int, seed: SeedLike) -> list:
    """Deal relation ids round-robin after a seeded shuffle.

    Returns one sorted id list per client; sizes differ by at most one.
    """
    if n_clients < 1:
        raise ValueError(f"need at least one client, got {n_clients}")
    if n_clients > n_relations:
        raise ValueError(
            f"cannot spread {n_relations} relation(s) across {n_clients} clients")
    order = as_rng(seed).permutation(n_relations)
    return [sorted(int(r) for r in order[i::n_clients]) for i in range(n_clients)]


def partition_by_relation(kg: KnowledgeGraph, n_clients: int, seed: SeedLike) -> list:
    """Split a graph into client shards; every relation lives on exactly one client.

    Client shards share the input vocabularies, so ids stay global. Triple
    order within a shard follows the input order.
    """
    assign = relation_assignments(kg.n_relations, n_clients, seed)
    owner = np.empty(kg.n_relations, dtype=int)
    for cid, rel_ids in enumerate(assign):
        owner[rel_ids] = cid
    buckets: list[list[Triple]] = [[] for _ in range(n_clients)]
    for trip in kg.triples:
        buckets[owner[trip.relation]].append(trip)
    return [KnowledgeGraph(b, kg.entity_vocab, kg.relation_vocab) for b in buckets]


def split_forget(kg: KnowledgeGraph, ratio: float, seed: SeedLike) -> ForgetSplit:
    """Sample floor(ratio*n + 0.5) triples uniformly without replacement.

    Both halves keep the original triple order.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"forget ratio must lie in [0, 1], got {ratio}")
    n = len(kg.triples)
    k = int(np.floor(ratio * n + 0.5))
    chosen: set[int] = set()
    if k:
        chosen = {int(i) for i in as_rng(seed).choice(n, size=k, replace=False)}
    forget = [t for i, t in enumerate(kg.triples) if i in chosen]
    remaining = [t for i, t in enumerate(kg.triples) if i not in chosen]
    return ForgetSplit(forget=forget, remaining=remaining)


def write_partition(kg: KnowledgeGraph, n_clients: int, seed: SeedLike, out_dir) -> list:
    """Write client_<i>.txt shards plus a `manifest` of client -> relation ids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = partition_by_relation(kg, n_clients, seed)
    assign = relation_assignments(kg.n_relations, n_clients, seed)
    paths = []
    for cid, part in enumerate(parts):
        p = out / f"client_{cid}.txt"
        save_triples(kg, p, part.triples)
        paths.append(p)
    with open(out / "manifest", "w", encoding="utf-8") as fh:
        for cid, rel_ids in enumerate(assign):
            fh.write(f"{cid}\t{' '.join(str(r) for r in rel_ids)}\n")
    return paths


def generate_synthetic_kg(entities: int, relations: int, triples: int,
                          test_triples: Optional[int] = None, seed: SeedLike = 0,
                          structured_fraction: float = 0.5,
                          latent_dim: int = 8):
    """Build a small train/test pair with plantable structure.

    A latent translation model generates `structured_fraction` of the facts
    (the best-scoring pairs per relation), the rest are uniform noise. The
    structured part is what makes held-out triples predictable at all; a fully
    random graph would leave every model at chance.

    Returns (train_kg, test_kg) sharing vocabularies; entity i is named e<i>.
    """
    if entities < 2 or relations < 1 or triples < 1:
        raise ValueError("need entities >= 2, relations >= 1, triples >= 1")
    if not 0.0 <= structured_fraction <= 1.0:
        raise ValueError("structured_fraction must lie in [0, 1]")
    if test_triples is None:
        test_triples = max(1, round(0.1 * triples))
    total = triples + test_triples
    capacity = entities * (entities - 1) * relations
    if total > capacity:
        raise ValueError(f"asked for {total} facts but only {capacity} distinct triples exist")

    rng = as_rng(seed)
    z = rng.standard_normal((entities, latent_dim))
    shift = rng.standard_normal((relations, latent_dim))

    n_struct = round(structured_fraction * total)
    quota = [n_struct // relations] * relations
    for i in range(n_struct % relations):
        quota[i] += 1

    facts: list[tuple] = []
    used: set[tuple] = set()
    for r in range(relations):
        if not quota[r]:
            continue
        dist = np.linalg.norm(z[:, None, :] + shift[r] - z[None, :, :], axis=-1)
        np.fill_diagonal(dist, np.inf)
        flat = np.argsort(dist, axis=None, kind="stable")
        take = min(quota[r], entities * (entities - 1))
        for idx in flat[:take]:
            h, t = divmod(int(idx), entities)
            fact = (h, r, t)
            if fact not in used:
                used.add(fact)
                facts.append(fact)

    while len(facts) < total:
        h = int(rng.integers(entities))
        t = int(rng.integers(entities))
        r = int(rng.integers(relations))
        if h == t:
            continue
        fact = (h, r, t)
        if fact in used:
            continue
        used.add(fact)
        facts.append(fact)

    order = rng.permutation(len(facts))
    facts = [facts[i] for i in order]
    ent_vocab = Vocab(f"e{i}" for i in range(entities))
    rel_vocab = Vocab(f"r{j}" for j in range(relations))
    train = KnowledgeGraph([Triple(*f) for f in facts[:triples]], ent_vocab, rel_vocab)
    test = KnowledgeGraph([Triple(*f) for f in facts[triples:total]], ent_vocab, rel_vocab)
    return train, test
