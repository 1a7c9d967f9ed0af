"""Flat key=value run configuration with CLI overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .federation import ARMS, TrainConfig
from .pipeline import DiffusionConfig, ExperimentPlan


class ConfigError(ValueError):
    """Unknown key, bad value, or unreadable config file."""


@dataclass
class RunConfig:
    # data
    train_path: str = ""
    test_path: str = ""
    synthetic: str = ""           # e.g. "entities=200,relations=10,triples=2000"
    run_dir: str = "runs"
    arms: str = "raw,retrained,unlearned"
    # model
    model: str = "transe"
    dim: int = 32
    transe_norm: str = "l1"
    # federation
    clients: int = 3
    rounds: int = 40
    client_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 1.0
    negatives: int = 5
    # calibrated: a sigmoid loss with zero margin collapses translation
    # embeddings into one cluster; 6.0 separates scales on unit-norm rows
    margin: float = 6.0
    distill_weight: float = 0.5
    entity_renorm: bool = True
    seed: int = 7
    # unlearning
    forget_ratio: float = 0.05
    finetune_rounds: str = "auto"   # "auto" resolves to 20% of rounds
    # diffusion
    diffusion_steps: int = 50
    diffusion_beta_start: float = 1e-4
    diffusion_beta_end: float = 0.02
    diffusion_width: int = 128
    diffusion_train_steps: int = 400
    diffusion_batch_size: int = 32
    diffusion_lr: float = 0.003
    diffusion_start_from: str = "reparam"
    diffusion_init_scale: float = 1.0
    diffusion_sigma_scale: float = 0.01
    train_reparam_heads: bool = False
    # evaluation / runtime
    filtered_eval: bool = True
    threads: int = 1

    def arm_list(self) -> list:
        arms = [a.strip() for a in self.arms.split(",") if a.strip()]
        for a in arms:
            if a not in ARMS:
                raise ConfigError(f"unknown arm {a!r}, expected one of {ARMS}")
        if not arms:
            raise ConfigError("no arms requested")
        return arms

    def resolved_finetune_rounds(self) -> int:
        if self.finetune_rounds == "auto":
            return round(0.2 * self.rounds)
        try:
            val = int(self.finetune_rounds)
        except ValueError as exc:
            raise ConfigError(f"finetune_rounds must be an integer or 'auto', "
                              f"got {self.finetune_rounds!r}") from exc
        if val < 0:
            raise ConfigError("finetune_rounds must be nonnegative")
        return val

    def validate(self) -> None:
        self.arm_list()
        self.resolved_finetune_rounds()
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        try:
            self.to_plan("raw")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            rounds=self.rounds, client_fraction=self.client_fraction,
            local_epochs=self.local_epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, negatives=self.negatives,
            margin=self.margin, distill_weight=self.distill_weight,
            seed=self.seed, model_kind=self.model, dim=self.dim,
            transe_norm=self.transe_norm, entity_renorm=self.entity_renorm)

    def to_diffusion_config(self) -> DiffusionConfig:
        return DiffusionConfig(
            steps=self.diffusion_steps, beta_start=self.diffusion_beta_start,
            beta_end=self.diffusion_beta_end, width=self.diffusion_width,
            train_steps=self.diffusion_train_steps,
            batch_size=self.diffusion_batch_size,
            learning_rate=self.diffusion_lr,
            start_from=self.diffusion_start_from,
            init_scale=self.diffusion_init_scale,
            sigma_scale=self.diffusion_sigma_scale,
            train_reparam_heads=self.train_reparam_heads)

    def to_plan(self, arm: str) -> ExperimentPlan:
        return ExperimentPlan(
            train=self.to_train_config(), diffusion=self.to_diffusion_config(),
            clients=self.clients, forget_ratio=self.forget_ratio,
            finetune_rounds=self.resolved_finetune_rounds(), arm=arm)

    def dump(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name}={getattr(self, f.name)}\n")
        return path


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _convert(name: str, kind: type, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """key=value lines; blank lines and #-comments are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file, then overrides; unknown keys are rejected."""
    defaults = RunConfig()
    types = {f.name: type(getattr(defaults, f.name)) for f in fields(RunConfig)}
    merged: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        merged.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        merged.update({k: str(v) for k, v in overrides.items()})
    cfg = RunConfig()
    for key, raw in merged.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _convert(key, types[key], raw))
    cfg.validate()
    return cfg


def parse_synthetic_spec(spec: str) -> dict:
    """Parse "entities=200,relations=10,triples=2000[,test=200][,seed_offset=0]"."""
    out = {"entities": 200, "relations": 10, "triples": 2000, "test": None}
    if spec:
        for part in spec.replace(" ", ",").split(","):
            if not part:
                continue
            if "=" not in part:
                raise ConfigError(f"bad synthetic spec token {part!r}")
            key, _, val = part.partition("=")
            if key not in out:
                raise ConfigError(f"unknown synthetic spec key {key!r}")
            out[key] = int(val)
    return out
