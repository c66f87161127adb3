"""YAML run configuration: strict schema, stable round-trip and a content fingerprint."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .backbone import DiTConfig
from .errors import ConfigError
from .flow import SamplerConfig
from .layout import SlotRegistry, default_registry
from .trainer import TrainConfig, TrainSchedule, parse_phases, preset

PATH_ENV = {"data": "CTXEDIT_DATA", "benchmark": "CTXEDIT_BENCHMARK", "runs": "CTXEDIT_RUNS"}


@dataclass
class DataConfig:
    height: int = 16
    width: int = 16
    frames: list = field(default_factory=lambda: [4])
    train_count: int = 200  # samples per task written by gen-data
    train_seed: int = 0
    benchmark_seed: int = 0
    benchmark_per_task: int = 20


@dataclass
class TrainSection:
    schedule: str = "hard_to_easy"  # preset name, or inline phases "task,task:steps;..."
    steps_per_phase: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 100
    decay: str = "cosine"  # or "none"
    min_lr_ratio: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    use_text: bool = False


@dataclass
class SampleSection:
    steps: int = 50
    seed: int = 0


@dataclass
class PathsSection:
    data: str = "data"
    benchmark: str = "benchmark"
    runs: str = "runs"


@dataclass
class Config:
    model: DiTConfig = field(default_factory=DiTConfig)
    registry: SlotRegistry = field(default_factory=default_registry)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- derived objects -------------------------------------------------------------------------
    def schedule(self) -> TrainSchedule:
        spec = self.train.schedule
        if ":" in spec:
            return parse_phases(spec)
        return preset(spec, self.train.steps_per_phase)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(batch_size=t.batch_size, lr=t.lr, warmup=t.warmup, weight_decay=t.weight_decay,
                           grad_clip=t.grad_clip, seed=t.seed, checkpoint_every=t.checkpoint_every,
                           height=self.data.height, width=self.data.width, frames=tuple(self.data.frames),
                           use_text=t.use_text, decay=t.decay, min_lr_ratio=t.min_lr_ratio)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.sample.steps, self.sample.seed)

    def path(self, name: str) -> Path:
        """A configured path; ``CTXEDIT_<NAME>`` in the environment overrides it."""
        env = os.environ.get(PATH_ENV[name])
        return Path(env if env else getattr(self.paths, name))

    # -- serialization ---------------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "registry": self.registry.to_dict(),
            "data": dataclasses.asdict(self.data),
            "train": dataclasses.asdict(self.train),
            "sample": dataclasses.asdict(self.sample),
            "paths": dataclasses.asdict(self.paths),
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def from_dict(data: Optional[dict]) -> Config:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    sections = {"model", "registry", "data", "train", "sample", "paths"}
    unknown = sorted(set(data) - sections)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    reg = data.get("registry")
    if reg is None:
        registry = default_registry()
    else:
        extra = sorted(set(reg) - {"max_latent_len", "entries"})
        if extra:
            raise ConfigError(f"unknown key(s) in 'registry': {', '.join(extra)}")
        try:
            registry = SlotRegistry.from_dict(reg)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid registry: {exc}") from None
    cfg = Config(_section(DiTConfig, data.get("model"), "model"), registry,
                 _section(DataConfig, data.get("data"), "data"), _section(TrainSection, data.get("train"), "train"),
                 _section(SampleSection, data.get("sample"), "sample"),
                 _section(PathsSection, data.get("paths"), "paths"))
    cfg.schedule()  # validate the schedule up front
    return cfg


def dumps(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


def loads(text: str) -> Config:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return from_dict(data)


def load(path) -> Config:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())
