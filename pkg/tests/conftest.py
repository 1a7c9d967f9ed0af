"""Shared helpers: finite differences, tiny graphs, hypothesis profile."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedscrub.data import KnowledgeGraph, Triple, Vocab

settings.register_profile(
    "suite", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


def fd_grad(f, x, eps=1e-5):
    """Central finite differences of a scalar function over a flat array."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    out = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        out[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = np.maximum(np.abs(n), 1e-6)
    return float(np.max(np.abs(a - n) / scale))


def make_kg(triples, n_entities=None, n_relations=None):
    """KnowledgeGraph from raw id triples, vocab padded to the given sizes."""
    trips = [Triple(*t) for t in triples]
    ne = 1 + max(max(t.head, t.tail) for t in trips)
    nr = 1 + max(t.relation for t in trips)
    ne = max(ne, n_entities or 0)
    nr = max(nr, n_relations or 0)
    ents = Vocab(f"e{i}" for i in range(ne))
    rels = Vocab(f"r{i}" for i in range(nr))
    return KnowledgeGraph(trips, ents, rels)


def random_kg(rng, n_entities, n_relations, n_triples):
    seen = set()
    while len(seen) < n_triples:
        h = int(rng.integers(n_entities))
        t = int(rng.integers(n_entities))
        r = int(rng.integers(n_relations))
        if h != t:
            seen.add((h, r, t))
    trips = sorted(seen)
    return make_kg(trips, n_entities, n_relations)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def write_triples(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in rows:
            fh.write(f"{h}\t{r}\t{t}\n")
    return path
