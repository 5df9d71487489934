"""The desk-scale distillation experiment: datasets and configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .ablation import AblationConfig
from .config import RunConfig
from .synthetic_video import ClipSpec, VideoClip, generate_dataset


@dataclass
class DeskData:
    train: list[VideoClip]
    val_short: list[VideoClip]
    val_long: list[VideoClip]
    spec: ClipSpec


def desk_datasets(seed: int = 0, num_train: int = 300, num_val: int = 60, frame_range=(12, 16),
                  spec: ClipSpec | None = None) -> DeskData:
    """Training clips plus short-interval (stride 1) and long-interval (stride 4) validation splits."""
    spec = spec or ClipSpec()
    train = generate_dataset(spec, num_train, seed=seed, frame_range=frame_range, prefix="train")
    val_short = generate_dataset(spec, num_val, seed=seed + 1000, frame_range=frame_range, prefix="short")
    val_long = generate_dataset(spec, num_val, seed=seed + 2000, frame_range=frame_range, stride=4, prefix="long")
    return DeskData(train, val_short, val_long, spec)


def desk_config() -> tuple[RunConfig, AblationConfig]:
    cfg = RunConfig(name="desk")
    cfg.optim.lr = 5e-4
    cfg.optim.clips_per_batch = 8
    cfg.teacher.steps = 3000
    cfg.teacher.lr = 5e-4
    # long-gap reassociation should rest on the embeddings, not on the retirement window
    cfg.tracker.retire_after = 100
    abl = AblationConfig(pretrain_steps=3000, finetune_steps=1500, seeds=(0, 1, 2))
    return cfg, abl


def scaled(abl: AblationConfig, factor: float) -> AblationConfig:
    return dataclasses.replace(abl, pretrain_steps=int(abl.pretrain_steps * factor),
                               finetune_steps=int(abl.finetune_steps * factor))
