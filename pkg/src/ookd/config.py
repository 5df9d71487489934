"""Run configuration: nested dataclasses, JSON round-trip and dotted ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .errors import ValidationError
from .losses import LossWeights
from .model import ModelConfig
from .teacher import AggregatorConfig
from .tracker import TrackerConfig


@dataclass
class DataConfig:
    train_root: str | None = None
    val_short_root: str | None = None
    val_long_root: str | None = None


@dataclass
class QFAConfig:
    lambda_b: float = 2.0
    mode: str = "hungarian"
    # "qfa": pair through shared GT indices; "index": student query n with teacher query n
    pairing: str = "qfa"


@dataclass
class OptimConfig:
    lr: float = 1e-4
    steps: int = 2000
    clips_per_batch: int = 8
    frames_per_clip: int = 2
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    log_every: int = 50


@dataclass
class TeacherConfig:
    steps: int = 1500
    lr: float = 1e-3
    clips_per_batch: int = 4
    frames_per_window: int = 4
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)


@dataclass
class RunConfig:
    name: str = "run"
    stage: str = "baseline"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    qfa: QFAConfig = field(default_factory=QFAConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_stages: tuple[str, ...] = ("baseline", "distill")
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        if self.qfa.mode not in ("hungarian", "argmin"):
            raise ValidationError(f"unknown mode {self.qfa.mode!r}", "qfa.mode")
        if self.qfa.pairing not in ("qfa", "index"):
            raise ValidationError(f"unknown pairing {self.qfa.pairing!r}", "qfa.pairing")
        if self.qfa.lambda_b < 0:
            raise ValidationError("must be >= 0", "qfa.lambda_b")
        if not 0 <= self.augment.k <= 1:
            raise ValidationError("must be in [0, 1]", "augment.k")
        if self.augment.mode not in ("minor", "uniform"):
            raise ValidationError(f"unknown mode {self.augment.mode!r}", "augment.mode")
        if self.optim.frames_per_clip != 2:
            raise ValidationError("the embedding loss needs exactly 2 frames per clip", "optim.frames_per_clip")
        if self.optim.steps < 0 or self.optim.lr <= 0:
            raise ValidationError("invalid steps/lr", "optim")

    def augment_enabled(self, stage: str) -> bool:
        return self.augment.enabled and stage in self.augment_stages

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ValidationError("unknown config key", prefix + key)
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            if not isinstance(value, dict):
                raise ValidationError("expected an object", prefix + key)
            kwargs[key] = _build(hint, value, prefix + key + ".")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"config file {path} not found", "config") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})", "config") from exc
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON, falling back to plain strings."""
    data = cfg.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value", "--set")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValidationError("unknown config key", key)
            node = node[p]
        if parts[-1] not in node:
            raise ValidationError("unknown config key", key)
        node[parts[-1]] = value
    return config_from_dict(data)
