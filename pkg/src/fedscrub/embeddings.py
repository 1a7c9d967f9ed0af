"""Entity/relation embedding tables, scoring functions, and their gradients.

Two model kinds are supported. "transe" scores a triple as the negative
distance between h + r and t. "complex" stores each d-dimensional row as
[real half | imaginary half] (d even) and scores Re(sum h * r * conj(t)).
Gradients are written out analytically; tests check them against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import textio
from .data import Triple
from .rng import SeedLike, as_rng

MODEL_KINDS = ("transe", "complex")
TRANSE_NORMS = ("l1", "l2")


def _check_model(model_kind: str) -> None:
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}")


def _check_norm(norm: str) -> None:
    if norm not in TRANSE_NORMS:
        raise ValueError(f"unknown norm {norm!r}, expected one of {TRANSE_NORMS}")


@dataclass
class EmbeddingTable:
    """Dense float64 entity and relation matrices plus the model kind."""

    entities: np.ndarray
    relations: np.ndarray
    model_kind: str = "transe"

    def __post_init__(self):
        _check_model(self.model_kind)
        self.entities = np.asarray(self.entities, dtype=float)
        self.relations = np.asarray(self.relations, dtype=float)
        if self.entities.ndim != 2 or self.relations.ndim != 2:
            raise ValueError("embedding matrices must be 2-D")
        if self.entities.shape[1] != self.relations.shape[1]:
            raise ValueError("entity and relation dimensions differ")
        if self.entities.shape[1] < 1:
            raise ValueError("embedding dimension must be positive")
        if self.model_kind == "complex" and self.entities.shape[1] % 2:
            raise ValueError("complex embeddings need an even dimension")
        if not (np.isfinite(self.entities).all() and np.isfinite(self.relations).all()):
            raise ValueError("embeddings contain non-finite values")

    @property
    def dim(self) -> int:
        return self.entities.shape[1]

    @property
    def entity_count(self) -> int:
        return self.entities.shape[0]

    @property
    def relation_count(self) -> int:
        return self.relations.shape[0]


@dataclass
class NegativeBatch:
    """A positive triple with its corrupted counterparts."""

    positive: Triple
    corrupted: list = field(default_factory=list)


def init_embeddings(entity_count: int, relation_count: int, dim: int,
                    seed: SeedLike, model_kind: str = "transe") -> EmbeddingTable:
    """Uniform init in [-6/sqrt(dim), 6/sqrt(dim)], entities drawn first."""
    if entity_count < 1 or relation_count < 1 or dim < 1:
        raise ValueError("entity_count, relation_count and dim must be positive")
    _check_model(model_kind)
    if model_kind == "complex" and dim % 2:
        raise ValueError("complex embeddings need an even dimension")
    bound = 6.0 / np.sqrt(dim)
    rng = as_rng(seed)
    ents = rng.uniform(-bound, bound, size=(entity_count, dim))
    rels = rng.uniform(-bound, bound, size=(relation_count, dim))
    return EmbeddingTable(ents, rels, model_kind)


def _vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise ValueError("expected a 1-D vector")
    return v


def score_transe(h, r, t, norm: str = "l1") -> float:
    """-||h + r - t|| under the chosen norm. Higher means more plausible."""
    _check_norm(norm)
    h, r, t = _vec(h), _vec(r), _vec(t)
    if not (h.shape == r.shape == t.shape):
        raise ValueError("h, r, t dimensions differ")
    v = h + r - t
    if norm == "l1":
        return float(-np.abs(v).sum())
    return float(-np.sqrt((v * v).sum()))


def score_complex(h, r, t) -> float:
    """Re(sum_k h_k r_k conj(t_k)) on rows stored as [real half | imag half]."""
    h, r, t = _vec(h), _vec(r), _vec(t)
    if not (h.shape == r.shape == t.shape):
        raise ValueError("h, r, t dimensions differ")
    if h.shape[0] % 2:
        raise ValueError("complex vectors need an even dimension")
    m = h.shape[0] // 2
    hr, hi = h[:m], h[m:]
    rr, ri = r[:m], r[m:]
    tr, ti = t[:m], t[m:]
    return float(((hr * rr - hi * ri) * tr + (hr * ri + hi * rr) * ti).sum())


def score_triple(table: EmbeddingTable, triple: Triple, norm: str = "l1") -> float:
    h = table.entities[triple.head]
    r = table.relations[triple.relation]
    t = table.entities[triple.tail]
    if table.model_kind == "transe":
        return score_transe(h, r, t, norm)
    return score_complex(h, r, t)


def batch_scores(model_kind: str, norm: str, eh, er, et) -> np.ndarray:
    """Vectorized scores over any broadcastable (..., d) stacks."""
    _check_model(model_kind)
    if model_kind == "transe":
        _check_norm(norm)
        v = eh + er - et
        if norm == "l1":
            return -np.abs(v).sum(axis=-1)
        return -np.sqrt((v * v).sum(axis=-1))
    m = eh.shape[-1] // 2
    hr, hi = eh[..., :m], eh[..., m:]
    rr, ri = er[..., :m], er[..., m:]
    tr, ti = et[..., :m], et[..., m:]
    return ((hr * rr - hi * ri) * tr + (hr * ri + hi * rr) * ti).sum(axis=-1)


def batch_grads(model_kind: str, norm: str, eh, er, et):
    """(dS/dh, dS/dr, dS/dt) for stacks shaped like batch_scores input."""
    _check_model(model_kind)
    if model_kind == "transe":
        _check_norm(norm)
        v = eh + er - et
        if norm == "l1":
            s = np.sign(v)
            return -s, -s, s
        nrm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        # zero-distance triples get a zero (sub)gradient
        u = np.divide(v, nrm, out=np.zeros_like(v), where=nrm > 0)
        return -u, -u, u
    m = eh.shape[-1] // 2
    hr, hi = eh[..., :m], eh[..., m:]
    rr, ri = er[..., :m], er[..., m:]
    tr, ti = et[..., :m], et[..., m:]
    dh = np.concatenate([rr * tr + ri * ti, -ri * tr + rr * ti], axis=-1)
    dr = np.concatenate([hr * tr + hi * ti, -hi * tr + hr * ti], axis=-1)
    dt = np.concatenate([hr * rr - hi * ri, hr * ri + hi * rr], axis=-1)
    return dh, dr, dt


def grad_score(model_kind: str, h, r, t, norm: str = "l1"):
    """Analytic (dS/dh, dS/dr, dS/dt) for a single triple."""
    h, r, t = _vec(h), _vec(r), _vec(t)
    if not (h.shape == r.shape == t.shape):
        raise ValueError("h, r, t dimensions differ")
    if model_kind == "complex" and h.shape[0] % 2:
        raise ValueError("complex vectors need an even dimension")
    dh, dr, dt = batch_grads(model_kind, norm, h, r, t)
    return dh, dr, dt


def sample_negatives(triple: Triple, n: int, entity_count: int,
                     seed: SeedLike) -> NegativeBatch:
    """Corrupt head or tail (fair coin), replacement uniform excluding the original."""
    if n < 1:
        raise ValueError("need at least one negative")
    if entity_count < 2:
        raise ValueError("need at least two entities to corrupt")
    rng = as_rng(seed)
    corrupted = []
    for _ in range(n):
        corrupt_head = bool(rng.integers(2))
        original = triple.head if corrupt_head else triple.tail
        repl = int(rng.integers(entity_count - 1))
        if repl >= original:
            repl += 1
        if corrupt_head:
            corrupted.append(Triple(repl, triple.relation, triple.tail))
        else:
            corrupted.append(Triple(triple.head, triple.relation, repl))
    return NegativeBatch(positive=triple, corrupted=corrupted)


def corrupt_batch(heads: np.ndarray, tails: np.ndarray, n: int, entity_count: int,
                  rng: np.random.Generator):
    """Vectorized corruption: returns (B, n) head and tail candidate ids."""
    if entity_count < 2:
        raise ValueError("need at least two entities to corrupt")
    b = heads.shape[0]
    coins = rng.integers(2, size=(b, n))  # 1 -> corrupt head, 0 -> corrupt tail
    repl = rng.integers(entity_count - 1, size=(b, n))
    orig = np.where(coins == 1, heads[:, None], tails[:, None])
    repl = repl + (repl >= orig)
    cand_h = np.where(coins == 1, repl, heads[:, None])
    cand_t = np.where(coins == 0, repl, tails[:, None])
    return cand_h, cand_t


def save_table(table: EmbeddingTable, directory) -> Path:
    """Text checkpoint: manifest.txt + entities.txt + relations.txt."""
    d = textio.ensure_dir(directory)
    textio.write_manifest(d / "manifest.txt", {
        "model_kind": table.model_kind,
        "dim": table.dim,
        "entity_count": table.entity_count,
        "relation_count": table.relation_count,
    })
    textio.write_matrix(d / "entities.txt", table.entities)
    textio.write_matrix(d / "relations.txt", table.relations)
    return d


def load_table(directory) -> EmbeddingTable:
    d = Path(directory)
    man = textio.read_manifest(d / "manifest.txt")
    dim = int(man["dim"])
    ents = textio.read_matrix(d / "entities.txt", cols=dim)
    rels = textio.read_matrix(d / "relations.txt", cols=dim)
    if ents.shape[0] != int(man["entity_count"]):
        raise ValueError(f"{d}: entity count mismatch")
    if rels.shape[0] != int(man["relation_count"]):
        raise ValueError(f"{d}: relation count mismatch")
    return EmbeddingTable(ents, rels, man["model_kind"])
