"""End-to-end arms: raw training, retraining, and the diffusion scrub.

Directory layout per run: <run_root>/<arm>/<seed>/ holding rounds.csv, the
stored config, and snapshot/ with the server and per-client tables. The
unlearned arm starts from the raw snapshot on disk, trains one noise model
per client on that client's forget-triple embeddings, writes generated
replacements into the affected rows, syncs them into the global table, and
fine-tunes on the remaining triples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import textio
from .data import (ForgetSplit, KnowledgeGraph, Triple, partition_by_relation,
                   relation_assignments, split_forget)
from .diffusion import (DiffusionSchedule, NoiseNet, ReparamHeads,
                        diffusion_train_step, generate_replacement, make_schedule,
                        make_heads, save_diffusion_model, train_heads_step)
from .embeddings import EmbeddingTable, init_embeddings, load_table, save_table
from .federation import (ARMS, ClientState, ServerState, TrainConfig,
                         append_round_log, aggregate, run_round)
from .rng import (DIFF_GENERATE, DIFF_TRAIN, FORGET, HEADS, INIT, PARTITION,
                  SELECT, derive_rng)

log = logging.getLogger(__name__)


@dataclass
class DiffusionConfig:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    width: int = 128
    train_steps: int = 400
    batch_size: int = 32
    learning_rate: float = 0.003
    start_from: str = "reparam"
    init_scale: float = 1.0
    sigma_scale: float = 0.01
    train_reparam_heads: bool = False
    head_steps: int = 20

    def __post_init__(self):
        if self.steps < 1 or self.width < 1 or self.batch_size < 1:
            raise ValueError("steps, width and batch_size must be positive")
        if self.train_steps < 0 or self.head_steps < 0:
            raise ValueError("train_steps and head_steps must be nonnegative")
        if self.learning_rate < 0 or self.init_scale < 0:
            raise ValueError("learning_rate and init_scale must be nonnegative")

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.steps, self.beta_start, self.beta_end)


@dataclass
class ExperimentPlan:
    """Everything one arm needs: training knobs, scrub knobs, and the splits."""

    train: TrainConfig
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    clients: int = 3
    forget_ratio: float = 0.05
    finetune_rounds: int = -1   # negative means 20% of the raw rounds
    arm: str = "raw"

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("need at least one client")
        if not 0.0 <= self.forget_ratio <= 1.0:
            raise ValueError("forget_ratio must lie in [0, 1]")

    @property
    def seed(self) -> int:
        return self.train.seed

    def resolved_finetune_rounds(self) -> int:
        if self.finetune_rounds >= 0:
            return self.finetune_rounds
        return round(0.2 * self.train.rounds)


@dataclass
class ClientSpec:
    """Partition and split bookkeeping for one client, before any parameters."""

    client_id: int
    triples: list
    owned_relations: list
    forget: ForgetSplit


def derive_clients(train_kg: KnowledgeGraph, plan: ExperimentPlan) -> list:
    """Partition by relation and draw each client's forget split, all seeded."""
    parts = partition_by_relation(train_kg, plan.clients, [plan.seed, PARTITION])
    assign = relation_assignments(train_kg.n_relations, plan.clients,
                                  [plan.seed, PARTITION])
    specs = []
    for cid, part in enumerate(parts):
        fs = split_forget(part, plan.forget_ratio, [plan.seed, FORGET, cid])
        specs.append(ClientSpec(cid, part.triples, assign[cid], fs))
    return specs


def build_states(train_kg: KnowledgeGraph, specs, plan: ExperimentPlan,
                 use_remaining_only: bool):
    """Fresh server and clients from the shared seeded initialization.

    Every client maps the full entity vocabulary (identity map), so local
    ranking sees every candidate and rows never trained by a client stay at
    their initialization. Relation rows are sliced from one global-shaped
    init so arms share starting values exactly.
    """
    init = init_embeddings(train_kg.n_entities, train_kg.n_relations,
                           plan.train.dim, [plan.seed, INIT], plan.train.model_kind)
    server = ServerState(entities=init.entities.copy(), round=0)
    clients = []
    for spec in specs:
        rel_ids = np.asarray(spec.owned_relations, dtype=int)
        triples = spec.forget.remaining if use_remaining_only else spec.triples
        clients.append(ClientState(
            client_id=spec.client_id,
            train_triples=triples,
            forget=spec.forget,
            entity_map=np.arange(train_kg.n_entities),
            relation_map=rel_ids,
            entities=init.entities.copy(),
            relations=init.relations[rel_ids].copy(),
            n_entities=train_kg.n_entities,
            n_relations=train_kg.n_relations,
        ))
    return server, clients


@dataclass
class ModelSnapshot:
    """Server table plus every client's rows and maps, as stored on disk."""

    model_kind: str
    dim: int
    global_entities: np.ndarray
    client_entities: list
    client_relations: list
    entity_maps: list
    relation_maps: list
    provenance: dict = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.client_entities)


def snapshot_from_states(server: ServerState, clients, plan: ExperimentPlan,
                         arm: str) -> ModelSnapshot:
    return ModelSnapshot(
        model_kind=plan.train.model_kind,
        dim=plan.train.dim,
        global_entities=server.entities.copy(),
        client_entities=[c.entities.copy() for c in clients],
        client_relations=[c.relations.copy() for c in clients],
        entity_maps=[c.entity_map.copy() for c in clients],
        relation_maps=[c.relation_map.copy() for c in clients],
        provenance={"arm": arm, "round": str(server.round),
                    "seed": str(plan.seed)},
    )


def save_snapshot(snap: ModelSnapshot, directory) -> Path:
    d = textio.ensure_dir(directory)
    textio.write_manifest(d / "provenance.txt", {
        **snap.provenance,
        "model_kind": snap.model_kind,
        "dim": snap.dim,
        "clients": snap.n_clients,
    })
    save_table(EmbeddingTable(snap.global_entities,
                              np.zeros((0, snap.dim)), snap.model_kind),
               d / "server")
    for cid in range(snap.n_clients):
        cdir = textio.ensure_dir(d / f"client_{cid}")
        save_table(EmbeddingTable(snap.client_entities[cid],
                                  snap.client_relations[cid], snap.model_kind),
                   cdir)
        textio.write_ints(cdir / "entity_map.txt", snap.entity_maps[cid])
        textio.write_ints(cdir / "relation_map.txt", snap.relation_maps[cid])
    return d


def load_snapshot(directory) -> ModelSnapshot:
    d = Path(directory)
    prov = textio.read_manifest(d / "provenance.txt")
    server = load_table(d / "server")
    n_clients = int(prov["clients"])
    ents, rels, emaps, rmaps = [], [], [], []
    for cid in range(n_clients):
        cdir = d / f"client_{cid}"
        table = load_table(cdir)
        ents.append(table.entities)
        rels.append(table.relations)
        emaps.append(textio.read_ints(cdir / "entity_map.txt"))
        rmaps.append(textio.read_ints(cdir / "relation_map.txt"))
    keep = {k: prov[k] for k in ("arm", "round", "seed") if k in prov}
    return ModelSnapshot(prov["model_kind"], int(prov["dim"]), server.entities,
                         ents, rels, emaps, rmaps, keep)


def _train_rounds(server: ServerState, clients, config: TrainConfig, rounds: int,
                  log_path: Optional[Path], threads: int = 1) -> None:
    if log_path is not None:
        log_path.unlink(missing_ok=True)  # reruns must not append to stale logs
    for _ in range(rounds):
        rng = derive_rng(config.seed, SELECT, server.round)
        summary = run_round(server, clients, config, rng, threads=threads)
        if log_path is not None:
            append_round_log(log_path, summary)
        log.debug("round %d ns=%.4f distill=%.4f", summary.round,
                  summary.mean_ns_loss, summary.mean_distill_loss)


def run_raw(train_kg: KnowledgeGraph, plan: ExperimentPlan, workdir,
            threads: int = 1) -> ModelSnapshot:
    """Train on every triple, forget set included."""
    workdir = textio.ensure_dir(workdir)
    specs = derive_clients(train_kg, plan)
    server, clients = build_states(train_kg, specs, plan, use_remaining_only=False)
    _train_rounds(server, clients, plan.train, plan.train.rounds,
                  workdir / "rounds.csv", threads)
    snap = snapshot_from_states(server, clients, plan, "raw")
    save_snapshot(snap, workdir / "snapshot")
    return snap


def run_retrained(train_kg: KnowledgeGraph, plan: ExperimentPlan, workdir,
                  threads: int = 1) -> ModelSnapshot:
    """Train from the same initialization on the remaining triples only."""
    workdir = textio.ensure_dir(workdir)
    specs = derive_clients(train_kg, plan)
    server, clients = build_states(train_kg, specs, plan, use_remaining_only=True)
    _train_rounds(server, clients, plan.train, plan.train.rounds,
                  workdir / "rounds.csv", threads)
    snap = snapshot_from_states(server, clients, plan, "retrained")
    save_snapshot(snap, workdir / "snapshot")
    return snap


def forget_embedding(client: ClientState, triple: Triple) -> np.ndarray:
    """Concatenated [head | relation | tail] rows for one triple."""
    h, r, t = client.encode([triple])
    return np.concatenate([client.entities[h[0]], client.relations[r[0]],
                           client.entities[t[0]]])


def scatter_replacements(client: ClientState, forget_triples, replacements) -> None:
    """Write generated vectors back over the rows the forget triples touch.

    Each replacement splits into head/relation/tail thirds. A row addressed
    by several thirds receives their arithmetic mean.
    """
    if len(forget_triples) != len(replacements):
        raise ValueError("one replacement vector per forget triple required")
    if not forget_triples:
        return
    d = client.entities.shape[1]
    ent_sum: dict = {}
    ent_cnt: dict = {}
    rel_sum: dict = {}
    rel_cnt: dict = {}
    h, r, t = client.encode(list(forget_triples))
    for i, vec in enumerate(replacements):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (3 * d,):
            raise ValueError(f"replacement {i} has shape {vec.shape}, expected ({3 * d},)")
        for key, store_sum, store_cnt, part in (
                (int(h[i]), ent_sum, ent_cnt, vec[:d]),
                (int(r[i]), rel_sum, rel_cnt, vec[d:2 * d]),
                (int(t[i]), ent_sum, ent_cnt, vec[2 * d:])):
            if key in store_sum:
                store_sum[key] = store_sum[key] + part
                store_cnt[key] += 1
            else:
                store_sum[key] = part.copy()
                store_cnt[key] = 1
    for row, total in ent_sum.items():
        client.entities[row] = total / ent_cnt[row]
    for row, total in rel_sum.items():
        client.relations[row] = total / rel_cnt[row]


def scrub_client(client: ClientState, plan: ExperimentPlan, workdir: Optional[Path] = None):
    """Train the client's noise model on its forget embeddings and replace them."""
    dcfg = plan.diffusion
    schedule = dcfg.schedule()
    forget = client.forget.forget
    if not forget:
        log.warning("client %d has an empty forget set, nothing to scrub",
                    client.client_id)
        return None
    x0 = np.stack([forget_embedding(client, trip) for trip in forget])
    dim = x0.shape[1]
    net = NoiseNet(dim, dcfg.width, dcfg.steps,
                   derive_rng(plan.seed, DIFF_TRAIN, client.client_id, 0),
                   init_scale=dcfg.init_scale)
    heads = make_heads(dim, dcfg.sigma_scale)
    train_rng = derive_rng(plan.seed, DIFF_TRAIN, client.client_id, 1)
    losses = []
    for _ in range(dcfg.train_steps):
        idx = train_rng.integers(0, x0.shape[0], size=dcfg.batch_size)
        losses.append(diffusion_train_step(x0[idx], net, schedule,
                                           dcfg.learning_rate, train_rng))
    if dcfg.train_reparam_heads:
        head_rng = derive_rng(plan.seed, HEADS, client.client_id)
        for _ in range(dcfg.head_steps):
            idx = head_rng.integers(0, x0.shape[0], size=min(dcfg.batch_size, 8))
            train_heads_step(x0[idx], net, heads, schedule,
                             dcfg.learning_rate, head_rng)
    replacements = []
    for i in range(x0.shape[0]):
        gen_rng = derive_rng(plan.seed, DIFF_GENERATE, client.client_id, i)
        replacements.append(generate_replacement(x0[i], net, heads, schedule,
                                                 gen_rng, dcfg.start_from))
    scatter_replacements(client, forget, replacements)
    if workdir is not None:
        save_diffusion_model(net, schedule, workdir)
    return losses


def run_unlearned(train_kg: KnowledgeGraph, plan: ExperimentPlan,
                  raw_snapshot: ModelSnapshot, workdir,
                  threads: int = 1) -> ModelSnapshot:
    """Scrub forget rows out of the raw model, then fine-tune on the rest.

    The scrub happens client by client on the raw tables; the fresh rows are
    synced into the global table by one aggregation before fine-tuning, so
    the first fine-tune round distributes scrubbed rows, not stale ones.
    """
    workdir = textio.ensure_dir(workdir)
    specs = derive_clients(train_kg, plan)
    server, clients = build_states(train_kg, specs, plan, use_remaining_only=True)
    if raw_snapshot.n_clients != len(clients):
        raise ValueError("raw snapshot does not match the derived client layout")
    server.entities = raw_snapshot.global_entities.copy()
    server.round = int(raw_snapshot.provenance.get("round", plan.train.rounds))
    for cid, c in enumerate(clients):
        if not np.array_equal(raw_snapshot.entity_maps[cid], c.entity_map) or \
                not np.array_equal(raw_snapshot.relation_maps[cid], c.relation_map):
            raise ValueError(f"client {cid}: snapshot maps do not match this data")
        c.entities = raw_snapshot.client_entities[cid].copy()
        c.relations = raw_snapshot.client_relations[cid].copy()
    for c in clients:
        scrub_client(c, plan, workdir / f"diffusion_client_{c.client_id}")
    aggregate(server, clients)
    _train_rounds(server, clients, plan.train, plan.resolved_finetune_rounds(),
                  workdir / "rounds.csv", threads)
    snap = snapshot_from_states(server, clients, plan, "unlearned")
    save_snapshot(snap, workdir / "snapshot")
    return snap
