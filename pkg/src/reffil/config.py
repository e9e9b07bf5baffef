"""Experiment configuration: YAML text with a versioned schema, validated into dataclasses.

Minimal file::

    schema_version: 1
    method: reffil
    dataset:
      domains:
        - {angle_deg: 0}
        - {angle_deg: 60}

Everything else falls back to defaults (R=30 rounds, E=20 local epochs,
80% task transition, tau=0.9, tau_min=0.3, gamma=0.1, beta=0.05).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import yaml

from .data import DomainSpec
from .losses import TemperatureSchedule
from .model import ModelConfig

SCHEMA_VERSION = 1
METHODS = ("reffil", "finetune")


class ConfigError(ValueError):
    """Parse or validation failure; message names the location or field."""


@dataclass
class DatasetConfig:
    domains: list[DomainSpec] = field(default_factory=list)
    samples_per_task: int = 600
    test_samples_per_task: int = 300
    n_classes: int = 6
    in_dim: int = 16
    dirichlet_alpha: float = 1.0


@dataclass
class ScheduleConfig:
    rounds: int = 30
    epochs: int = 20
    lr: float = 0.03
    batch_size: int = 32
    select: int = 10
    initial_clients: int = 20
    increment: int = 2
    transition_fraction: float = 0.8


@dataclass
class LossConfig:
    tau: float = 0.9
    tau_min: float = 0.3
    gamma: float = 0.1
    beta: float = 0.05
    use_gpl: bool = True
    use_dpcl: bool = True

    @property
    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau, self.tau_min, self.gamma, self.beta)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    method: str = "reffil"
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    @property
    def tasks(self) -> int:
        return len(self.dataset.domains)

    def validate(self) -> "ExperimentConfig":
        ds, sc = self.dataset, self.schedule
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported version {self.schema_version}")
        if self.method not in METHODS:
            raise ConfigError(f"method: must be one of {METHODS}, got {self.method!r}")
        if not ds.domains:
            raise ConfigError("dataset.domains: at least one domain is required")
        for i, spec in enumerate(ds.domains):
            if spec.task_id != i + 1:
                raise ConfigError(f"dataset.domains[{i}].task_id: must be {i + 1}")
            try:
                spec.validate(ds.in_dim)
            except ValueError as exc:
                raise ConfigError(f"dataset.domains[{i}]: {exc}") from None
        for name in ("samples_per_task", "test_samples_per_task", "n_classes", "in_dim"):
            _positive(f"dataset.{name}", getattr(ds, name))
        if ds.n_classes < 2:
            raise ConfigError("dataset.n_classes: must be >= 2")
        if ds.samples_per_task < ds.n_classes:
            raise ConfigError("dataset.samples_per_task: must be >= n_classes")
        if not ds.dirichlet_alpha > 0:
            raise ConfigError("dataset.dirichlet_alpha: must be positive")
        for name in ("rounds", "epochs", "batch_size", "select", "initial_clients"):
            _positive(f"schedule.{name}", getattr(sc, name))
        if sc.increment < 0:
            raise ConfigError("schedule.increment: must be >= 0")
        if not sc.lr >= 0:
            raise ConfigError("schedule.lr: must be >= 0")
        if not 0 <= sc.transition_fraction <= 1:
            raise ConfigError(f"schedule.transition_fraction: must lie in [0, 1], got {sc.transition_fraction}")
        if sc.select > sc.initial_clients:
            raise ConfigError("schedule.select: cannot exceed initial_clients")
        for name in ("n_tokens", "dim", "prompt_len", "heads", "key_dim", "hidden", "mlp_ratio"):
            _positive(f"model.{name}", getattr(self.model, name))
        if self.model.dim % self.model.heads:
            raise ConfigError("model.dim: must be divisible by model.heads")
        try:
            self.loss.schedule.validate()
        except ValueError as exc:
            raise ConfigError(f"loss: {exc}") from None
        return self


def _positive(name: str, value) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
        raise ConfigError(f"{name}: must be a positive number, got {value!r}")


def _build(cls, raw: Any, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return cls(**raw)


def _domain(raw: Any, index: int) -> DomainSpec:
    where = f"dataset.domains[{index}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    raw = dict(raw)
    if "angle_deg" in raw:
        if "angle" in raw:
            raise ConfigError(f"{where}: give angle or angle_deg, not both")
        raw["angle"] = math.radians(raw.pop("angle_deg"))
    raw.setdefault("task_id", index + 1)
    return _build(DomainSpec, raw, where)


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    raw = dict(raw)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    ds_raw = dict(raw.pop("dataset", None) or {})
    domains = [_domain(d, i) for i, d in enumerate(ds_raw.pop("domains", None) or [])]
    dataset = _build(DatasetConfig, ds_raw, "dataset")
    dataset.domains = domains
    try:
        cfg = ExperimentConfig(
            dataset=dataset,
            model=_build(ModelConfig, raw.pop("model", None), "model"),
            schedule=_build(ScheduleConfig, raw.pop("schedule", None), "schedule"),
            loss=_build(LossConfig, raw.pop("loss", None), "loss"),
            **raw,
        )
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None
    return cfg.validate()


def to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    for d in out["dataset"]["domains"]:
        for key in ("scale", "shift"):
            if isinstance(d[key], tuple):
                d[key] = list(d[key])
    return out


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"parse error at {where}: {exc.problem}") from None
    return from_dict(raw or {})


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


def default_config() -> ExperimentConfig:
    """Defaults plus a three-domain rotation benchmark so the result validates."""
    cfg = ExperimentConfig()
    cfg.dataset.domains = [
        DomainSpec(task_id=i + 1, angle=math.radians(deg), noise_sigma=1.0) for i, deg in enumerate((0, 60, 120))
    ]
    return cfg.validate()
