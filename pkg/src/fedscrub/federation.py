"""Federated training loop: client state, local epochs, and row aggregation.

The server owns a global entity table. Each round it distributes the rows a
client knows about, the client runs local SGD on its own triples (negative
sampling plus mutual distillation against the freshly distributed copy), and
the server averages entity rows over the clients that hold them. Relation
rows never leave their owning client.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import ForgetSplit, Triple
from .embeddings import TRANSE_NORMS, batch_grads, batch_scores, corrupt_batch, _check_model
from .rng import EPOCH, derive_rng

ARMS = ("raw", "retrained", "unlearned")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_clamped(p: np.ndarray) -> np.ndarray:
    # sigmoid outputs are clamped away from {0, 1} before the log
    return np.log(np.clip(p, 1e-12, 1.0 - 1e-12))


def _logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def ns_loss(pos_score: float, neg_scores, margin: float = 0.0) -> float:
    """Negative-sampling sigmoid loss for one positive and its negatives."""
    negs = np.asarray(neg_scores, dtype=float).ravel()
    if negs.size < 1:
        raise ValueError("need at least one negative score")
    pos_term = -_log_clamped(_sigmoid(np.asarray([margin + pos_score])))[0]
    neg_term = -_log_clamped(_sigmoid(-margin - negs)).mean()
    return float(pos_term + neg_term)


def candidate_distribution(scores) -> np.ndarray:
    """Stable softmax over a candidate score vector."""
    arr = np.asarray(scores, dtype=float).ravel()
    if arr.size < 2:
        raise ValueError("need at least two candidates")
    e = np.exp(arr - arr.max())
    return e / e.sum()


def distill_loss(p, q) -> float:
    """KL(p || q) with q clamped at 1e-12; zero-mass p terms contribute nothing."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise ValueError("distributions must have the same length")
    qc = np.clip(q, 1e-12, None)
    mask = p > 0
    return float((p[mask] * (np.log(p[mask]) - np.log(qc[mask]))).sum())


@dataclass
class TrainConfig:
    rounds: int = 40
    client_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 1.0
    negatives: int = 5
    margin: float = 0.0
    distill_weight: float = 0.5
    seed: int = 7
    model_kind: str = "transe"
    dim: int = 32
    transe_norm: str = "l1"
    # classic translation-embedding recipe: project entity rows back onto the
    # unit sphere after each update; prevents the norm collapse a zero-margin
    # sigmoid loss otherwise drifts into. Ignored for complex (self-limiting).
    entity_renorm: bool = True

    def __post_init__(self):
        _check_model(self.model_kind)
        if self.transe_norm not in TRANSE_NORMS:
            raise ValueError(f"unknown norm {self.transe_norm!r}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be nonnegative")
        if self.batch_size < 1 or self.negatives < 1 or self.dim < 1:
            raise ValueError("batch_size, negatives and dim must be positive")
        if self.learning_rate < 0 or self.margin < 0 or self.distill_weight < 0:
            raise ValueError("learning_rate, margin and distill_weight must be nonnegative")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction must lie in (0, 1]")


@dataclass
class ClientState:
    """One client's shard: triples, row maps into the global table, and parameters."""

    client_id: int
    train_triples: list
    forget: ForgetSplit
    entity_map: np.ndarray      # local row -> global entity id, injective
    relation_map: np.ndarray    # local row -> global relation id, injective
    entities: np.ndarray        # (n_local, d)
    relations: np.ndarray       # (n_owned, d)
    n_entities: int
    n_relations: int
    global_copy: Optional[np.ndarray] = None
    h_loc: np.ndarray = field(init=False)
    r_loc: np.ndarray = field(init=False)
    t_loc: np.ndarray = field(init=False)

    def __post_init__(self):
        self.entity_map = np.asarray(self.entity_map, dtype=int)
        self.relation_map = np.asarray(self.relation_map, dtype=int)
        for name, m, bound in (("entity", self.entity_map, self.n_entities),
                               ("relation", self.relation_map, self.n_relations)):
            if m.size and (m.min() < 0 or m.max() >= bound):
                raise ValueError(f"client {self.client_id}: {name} map out of range")
            if len(np.unique(m)) != m.size:
                raise ValueError(f"client {self.client_id}: {name} map not injective")
        self._ent_local = np.full(self.n_entities, -1, dtype=int)
        self._ent_local[self.entity_map] = np.arange(self.entity_map.size)
        self._rel_local = np.full(self.n_relations, -1, dtype=int)
        self._rel_local[self.relation_map] = np.arange(self.relation_map.size)
        self.h_loc, self.r_loc, self.t_loc = self.encode(self.train_triples)
        # scrub needs the forget triples mapped too
        self.encode(self.forget.forget)

    def encode(self, triples):
        """Translate global triple ids to local rows; unmapped ids are an error."""
        if not triples:
            z = np.zeros(0, dtype=int)
            return z, z.copy(), z.copy()
        arr = np.asarray(triples, dtype=int)
        h = self._ent_local[arr[:, 0]]
        r = self._rel_local[arr[:, 1]]
        t = self._ent_local[arr[:, 2]]
        if (h < 0).any() or (r < 0).any() or (t < 0).any():
            raise ValueError(f"client {self.client_id}: triple references unmapped rows")
        return h, r, t

    @property
    def n_local(self) -> int:
        return self.entity_map.size


@dataclass
class ServerState:
    entities: np.ndarray
    round: int = 0


@dataclass
class EpochStats:
    ns_loss: float = 0.0
    distill_loss: float = 0.0

    @property
    def total(self) -> float:
        return self.ns_loss + self.distill_loss


@dataclass
class RoundSummary:
    round: int
    selected_ids: list
    mean_ns_loss: float
    mean_distill_loss: float


def select_clients(n_clients: int, fraction: float, rng: np.random.Generator) -> list:
    """Uniform sample of ceil(fraction * n) distinct clients, returned sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if n_clients < 1:
        raise ValueError("need at least one client")
    k = math.ceil(fraction * n_clients)
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def distribute(server: ServerState, client: ClientState) -> None:
    """Overwrite the client's entity rows and its reference copy from the server."""
    m = client.entity_map
    if m.size and (m.min() < 0 or m.max() >= server.entities.shape[0]):
        raise ValueError(f"client {client.client_id}: entity map exceeds global table")
    rows = server.entities[m]
    client.entities = rows.copy()
    client.global_copy = rows.copy()


def aggregate(server: ServerState, clients) -> None:
    """Mean of each entity row over the clients holding it.

    Computed as base_row + sum(deviations)/count over clients sorted by id, so
    identical rows aggregate to themselves bit-for-bit and the result never
    depends on scheduling.
    """
    order = sorted(clients, key=lambda c: c.client_id)
    n, d = server.entities.shape
    count = np.zeros(n, dtype=int)
    base = np.zeros((n, d))
    dev = np.zeros((n, d))
    for c in order:
        ids = c.entity_map
        if ids.size == 0:
            continue
        fresh = count[ids] == 0
        base[ids[fresh]] = c.entities[fresh]
        rep = ~fresh
        if rep.any():
            dev[ids[rep]] += c.entities[rep] - base[ids[rep]]
        count[ids] += 1
    single = count == 1
    server.entities[single] = base[single]
    multi = count > 1
    if multi.any():
        server.entities[multi] = base[multi] + dev[multi] / count[multi, None]


def local_epoch(client: ClientState, global_rows: Optional[np.ndarray],
                config: TrainConfig, rng: np.random.Generator) -> EpochStats:
    """One pass of shuffled mini-batch SGD over the client's triples.

    Loss per positive is the negative-sampling term plus distill_weight times
    the symmetric KL between the local and global candidate distributions
    (candidates = the positive plus its negatives, scored on both tables).
    Gradients flow into local entity rows, relation rows, and the global copy.
    """
    n = client.h_loc.size
    if n == 0:
        return EpochStats()
    kind, norm = config.model_kind, config.transe_norm
    lam = config.distill_weight
    use_distill = lam > 0 and global_rows is not None
    lr = config.learning_rate
    n_neg = config.negatives
    d = client.entities.shape[1]

    g_ent = np.zeros_like(client.entities)
    g_rel = np.zeros_like(client.relations)
    g_glob = np.zeros_like(global_rows) if use_distill else None

    renorm = config.entity_renorm and kind == "transe" and lr > 0
    if renorm:
        _project_unit(client.entities)

    order = rng.permutation(n)
    ns_sum = 0.0
    dist_sum = 0.0
    for start in range(0, n, config.batch_size):
        sel = order[start:start + config.batch_size]
        b = sel.size
        h = client.h_loc[sel]
        r = client.r_loc[sel]
        t = client.t_loc[sel]
        ch, ct = corrupt_batch(h, t, n_neg, client.n_local, rng)
        cand_h = np.concatenate([h[:, None], ch], axis=1)   # (b, n_neg+1)
        cand_t = np.concatenate([t[:, None], ct], axis=1)

        eh = client.entities[cand_h]
        et = client.entities[cand_t]
        er = client.relations[r][:, None, :]
        s_loc = batch_scores(kind, norm, eh, er, et)

        d_loc = np.zeros_like(s_loc)
        d_loc[:, 0] = _sigmoid(config.margin + s_loc[:, 0]) - 1.0
        d_loc[:, 1:] = _sigmoid(config.margin + s_loc[:, 1:]) / n_neg
        pos_term = -_log_clamped(_sigmoid(config.margin + s_loc[:, 0]))
        neg_term = -_log_clamped(_sigmoid(-config.margin - s_loc[:, 1:])).mean(axis=1)
        ns_sum += float((pos_term + neg_term).sum())

        if use_distill:
            gh = global_rows[cand_h]
            gt = global_rows[cand_t]
            s_glob = batch_scores(kind, norm, gh, er, gt)
            log_p = s_loc - _logsumexp(s_loc, axis=1, keepdims=True)
            log_q = s_glob - _logsumexp(s_glob, axis=1, keepdims=True)
            p = np.exp(log_p)
            q = np.exp(log_q)
            kl_pq = (p * (log_p - log_q)).sum(axis=1)
            kl_qp = (q * (log_q - log_p)).sum(axis=1)
            dist_sum += float(lam * (kl_pq + kl_qp).sum())
            d_loc += lam * (p * ((log_p - log_q) - kl_pq[:, None]) + (p - q))
            d_glob = lam * (q * ((log_q - log_p) - kl_qp[:, None]) + (q - p))

        w_loc = (d_loc / b)[..., None]
        dh, dr, dt = batch_grads(kind, norm, eh, er, et)
        np.add.at(g_ent, cand_h.ravel(), (w_loc * dh).reshape(-1, d))
        np.add.at(g_ent, cand_t.ravel(), (w_loc * dt).reshape(-1, d))
        np.add.at(g_rel, r, (w_loc * dr).sum(axis=1))
        if use_distill:
            w_glob = (d_glob / b)[..., None]
            dhg, drg, dtg = batch_grads(kind, norm, gh, er, gt)
            np.add.at(g_glob, cand_h.ravel(), (w_glob * dhg).reshape(-1, d))
            np.add.at(g_glob, cand_t.ravel(), (w_glob * dtg).reshape(-1, d))
            np.add.at(g_rel, r, (w_glob * drg).sum(axis=1))

        if lr > 0:
            client.entities -= lr * g_ent
            client.relations -= lr * g_rel
            g_ent.fill(0.0)
            g_rel.fill(0.0)
            if use_distill:
                global_rows -= lr * g_glob
                g_glob.fill(0.0)
            if renorm:
                touched = np.unique(np.concatenate([cand_h.ravel(), cand_t.ravel()]))
                _project_unit(client.entities, touched)

    return EpochStats(ns_loss=ns_sum / n, distill_loss=dist_sum / n)


def _project_unit(entities: np.ndarray, rows=None) -> None:
    """Scale the given entity rows (default: all) to unit L2 norm in place."""
    view = entities if rows is None else entities[rows]
    norms = np.sqrt((view * view).sum(axis=1, keepdims=True))
    scaled = np.divide(view, norms, out=view.copy(), where=norms > 0)
    if rows is None:
        entities[...] = scaled
    else:
        entities[rows] = scaled


def run_round(server: ServerState, all_clients, config: TrainConfig,
              rng: np.random.Generator, threads: int = 1) -> RoundSummary:
    """Select, distribute, train locally, aggregate, advance the round counter.

    Per-client epoch randomness is derived from (seed, client, round, epoch),
    never from a shared sequential stream, so results do not depend on the
    thread count.
    """
    ids = select_clients(len(all_clients), config.client_fraction, rng)
    selected = [all_clients[i] for i in ids]
    for c in selected:
        distribute(server, c)
    round_idx = server.round

    def train_one(client: ClientState) -> EpochStats:
        ns = dist = 0.0
        for e in range(config.local_epochs):
            r = derive_rng(config.seed, EPOCH, client.client_id, round_idx, e)
            st = local_epoch(client, client.global_copy, config, r)
            ns += st.ns_loss
            dist += st.distill_loss
        k = max(config.local_epochs, 1)
        return EpochStats(ns / k, dist / k)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            stats = list(pool.map(train_one, selected))
    else:
        stats = [train_one(c) for c in selected]

    aggregate(server, selected)
    server.round += 1
    return RoundSummary(
        round=round_idx,
        selected_ids=ids,
        mean_ns_loss=float(np.mean([s.ns_loss for s in stats])),
        mean_distill_loss=float(np.mean([s.distill_loss for s in stats])),
    )


ROUND_LOG_HEADER = "round,selected_ids,mean_ns_loss,mean_distill_loss"


def append_round_log(path, summary: RoundSummary) -> None:
    """Append one round to the csv log, writing the header on first use."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(ROUND_LOG_HEADER + "\n")
        ids = ";".join(str(i) for i in summary.selected_ids)
        fh.write(f"{summary.round},{ids},"
                 f"{summary.mean_ns_loss:.9g},{summary.mean_distill_loss:.9g}\n")
