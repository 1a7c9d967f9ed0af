"""Federated knowledge-graph embedding training with diffusion-based unlearning.

The package simulates a server coordinating clients that each own a disjoint
slice of a knowledge graph's relations, trains translation or complex-product
embeddings with negative sampling and mutual distillation, and removes a
forget set from a trained model by overwriting the affected rows with samples
from a per-client denoising diffusion model before fine-tuning.
"""

__version__ = "0.1.0"

from .data import (ForgetSplit, KnowledgeGraph, Triple, TripleFileError, Vocab,
                   generate_synthetic_kg, load_triples, partition_by_relation,
                   save_triples, split_forget, write_partition)
from .embeddings import (EmbeddingTable, NegativeBatch, grad_score,
                         init_embeddings, load_table, sample_negatives,
                         save_table, score_complex, score_transe)
from .federation import (ClientState, EpochStats, RoundSummary, ServerState,
                         TrainConfig, aggregate, candidate_distribution,
                         distill_loss, distribute, local_epoch, ns_loss,
                         run_round, select_clients)
from .diffusion import (DiffusionSchedule, NoiseNet, ReparamHeads,
                        diffusion_train_step, forward_step, forward_to,
                        generate_replacement, make_heads, make_schedule,
                        reparameterize, reverse_step)
from .evaluation import (EvalSet, FilterIndex, compute_metrics, evaluate,
                         hits_at_n, mrr, rank_triple)
from .pipeline import (DiffusionConfig, ExperimentPlan, ModelSnapshot,
                       derive_clients, load_snapshot, run_raw, run_retrained,
                       run_unlearned, save_snapshot, scatter_replacements)

__all__ = [name for name in dir() if not name.startswith("_")]
