"""Experiment configuration: JSON schema, validation and hashing.

Every block is a dataclass; :func:`load_config` rejects unknown keys at
every level and :func:`config_hash` fingerprints the normalized config.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

DEFAULT_LR_GRID = (1e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3)
SEED_ENV = "ADAPTERFORGE_SEED"

TASK_KINDS = ("lowrank_teacher_regression", "blob_classification")
OPTIMIZERS = ("sgd", "adamw")
SCHEDULES = ("constant", "linear_warmup_decay", "cosine", "jagged")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "lowrank_teacher_regression"
    in_features: int = 64
    out_features: int = 64
    teacher_rank: int = 4
    noise: float = 0.01
    samples: int = 4096
    eval_samples: int = 1024
    depth: int = 1

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}")
        for name in ("in_features", "out_features", "teacher_rank", "samples", "eval_samples", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"task.{name} must be >= 1")
        if self.noise < 0:
            raise ConfigError("task.noise must be >= 0")
        if self.kind == "blob_classification" and self.out_features < 2:
            raise ConfigError("blob_classification needs out_features >= 2 classes")


@dataclass(frozen=True)
class AdapterConfig:
    variant: str = "lora"
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.0
    scaling_mode: str = "standard"
    params: dict = field(default_factory=dict)
    label: str | None = None

    @property
    def name(self) -> str:
        return self.label or self.variant


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.0

    def validate(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer.kind must be one of {OPTIMIZERS}")
        if self.lr < 0:
            raise ConfigError("optimizer.lr must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("optimizer.betas must be two values in [0, 1)")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "constant"
    warmup_ratio: float = 0.03
    phase_length: int | None = None
    rewarmup_steps: int = 10

    def validate(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"schedule.kind must be one of {SCHEDULES}")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("schedule.warmup_ratio must lie in [0, 1)")
        if self.kind == "jagged" and (self.phase_length is None or self.phase_length < 1):
            raise ConfigError("jagged schedule needs phase_length >= 1")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 64
    eval_every: int = 25
    estimation_steps: int | None = None
    divergence_factor: float = 1e3

    def validate(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("train.steps, batch_size and eval_every must be >= 1")


@dataclass(frozen=True)
class SweepConfig:
    lrs: tuple = DEFAULT_LR_GRID
    lr_scale: float = 1.0
    variants: tuple = ()

    def validate(self):
        if not self.lrs:
            raise ConfigError("sweep.lrs needs at least one learning rate")
        if self.lr_scale <= 0:
            raise ConfigError("sweep.lr_scale must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        d["sweep"]["lrs"] = list(self.sweep.lrs)
        d["sweep"]["variants"] = [asdict(v) for v in self.sweep.variants]
        return d

    def with_run(self, adapter: AdapterConfig, lr: float) -> "ExperimentConfig":
        return replace(self, adapter=adapter, optimizer=replace(self.optimizer, lr=lr))


_BLOCKS = {
    "task": TaskConfig,
    "adapter": AdapterConfig,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "sweep": SweepConfig,
}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    kw = dict(data)
    if cls is OptimizerConfig and "betas" in kw:
        kw["betas"] = tuple(kw["betas"])
    if cls is SweepConfig:
        if "lrs" in kw:
            kw["lrs"] = tuple(float(v) for v in kw["lrs"])
        if "variants" in kw:
            kw["variants"] = tuple(
                _build(AdapterConfig, {"variant": v} if isinstance(v, str) else v, f"{where}.variants[{i}]")
                for i, v in enumerate(kw["variants"])
            )
    if cls is AdapterConfig and not isinstance(kw.get("params", {}), dict):
        raise ConfigError(f"{where}.params must be an object")
    try:
        obj = cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - {f.name for f in fields(ExperimentConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kw = {k: _build(_BLOCKS[k], v, k) for k, v in data.items() if k in _BLOCKS}
    if "seed" in data:
        if not isinstance(data["seed"], int) or isinstance(data["seed"], bool) or data["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        kw["seed"] = data["seed"]
    if "output" in data:
        kw["output"] = data["output"]
    cfg = ExperimentConfig(**kw)
    _check_adapter(cfg.adapter, "adapter")
    for i, v in enumerate(cfg.sweep.variants):
        _check_adapter(v, f"sweep.variants[{i}]")
    return cfg


def _check_adapter(a: AdapterConfig, where: str):
    from .adapters import AdapterError, AdapterSpec, resolve_spec

    try:
        resolve_spec(AdapterSpec(2, 2, rank=1, alpha=a.alpha, dropout=a.dropout, scaling_mode=a.scaling_mode,
                                 variant=a.variant, params=a.params))
    except AdapterError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if a.rank < 1:
        raise ConfigError(f"{where}.rank must be >= 1")


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    """Parse a JSON config file; ``ADAPTERFORGE_SEED`` overrides its seed."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    cfg = config_from_dict(data)
    return apply_seed_override(cfg, os.environ if env is None else env)


def apply_seed_override(cfg: ExperimentConfig, env) -> ExperimentConfig:
    raw = env.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigError(f"{SEED_ENV} must be non-negative")
    return replace(cfg, seed=seed)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("output", None)
    return hashlib.sha256(canonical_json(d).encode("utf-8")).hexdigest()[:16]
