"""Training stages: baseline frame model, offline aggregator, distilled student; plus evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import MinorPaste
from .config import RunConfig
from .errors import DivergenceError, ValidationError
from .evalkit import EvalResult, video_map
from .losses import (box_loss, classification_loss, embed_loss, idol_loss, kd_loss, mask_loss, total_loss)
from .model import ModelConfig, VISModel, load_checkpoint, parameter_hash, save_checkpoint
from .qfa import associate, cost_matrix, match, video_cost_matrix
from .synthetic_video import VideoClip
from .teacher import Aggregator, TeacherTrainConfig, build_offline_knowledge, freeze, train_aggregator
from .tracker import TrackerConfig, track_video

log = logging.getLogger(__name__)


def frame_targets(clip: VideoClip, t: int) -> dict:
    vis = [tr for tr in clip.instances if tr.visible[t]]
    H, W = clip.shape
    return {
        "ids": [tr.instance_id for tr in vis],
        "classes": np.array([tr.class_id for tr in vis], dtype=np.int64),
        "boxes": np.stack([tr.boxes[t] for tr in vis]) if vis else np.zeros((0, 4)),
        "masks": np.stack([tr.masks[t] for tr in vis]) if vis else np.zeros((0, H, W), dtype=bool),
    }


def build_model(cfg: ModelConfig, seed: int) -> VISModel:
    torch.manual_seed(seed)
    return VISModel(cfg)


# ------------------------------------------------------------------ teacher

class Teacher:
    """Frozen frame model + aggregator with a per-clip knowledge cache.

    The cache holds, per clip id, the unit-norm offline embeddings and the
    GT instance -> teacher query mapping from video-level matching. Augmented
    clips bypass the cache because their content differs from the stored clip.
    """

    def __init__(self, frame_model: VISModel, aggregator: Aggregator, lambda_b: float = 2.0):
        self.frame_model = freeze(frame_model)
        self.aggregator = freeze(aggregator)
        self.lambda_b = lambda_b
        self.cache: dict[str, tuple[torch.Tensor, dict[int, int]]] = {}

    @property
    def fingerprint(self) -> str:
        return parameter_hash(self.frame_model)[:16] + parameter_hash(self.aggregator)[:16]

    def knowledge(self, clip: VideoClip, use_cache: bool = True) -> tuple[torch.Tensor, dict[int, int]]:
        if use_cache and clip.clip_id in self.cache:
            return self.cache[clip.clip_id]
        with torch.no_grad():
            k = build_offline_knowledge(clip, self.frame_model, self.aggregator)
        tracks = [tr for tr in clip.instances if tr.visible.any()]
        mapping: dict[int, int] = {}
        if tracks:
            S = video_cost_matrix(k.video_class_logits, k.per_frame_boxes, [tr.class_id for tr in tracks],
                                  np.stack([tr.boxes for tr in tracks]), np.stack([tr.visible for tr in tracks]),
                                  self.lambda_b)
            sigma = match(S, "hungarian").sigma
            mapping = {tr.instance_id: int(q) for tr, q in zip(tracks, sigma)}
        entry = (k.embeddings.detach(), mapping)
        if use_cache:
            self.cache[clip.clip_id] = entry
        return entry

    def warm(self, dataset: list[VideoClip]) -> None:
        for clip in dataset:
            self.knowledge(clip)

    def save_cache(self, path) -> None:
        torch.save({"fingerprint": self.fingerprint, "cache": self.cache}, path)

    def load_cache(self, path) -> bool:
        """Load a cache file; ignored (returns False) if it belongs to another teacher."""
        if not Path(path).exists():
            return False
        payload = torch.load(path, weights_only=False)
        if payload.get("fingerprint") != self.fingerprint:
            return False
        self.cache = payload["cache"]
        return True


def save_teacher(path, teacher: Teacher, cfg: RunConfig) -> None:
    save_checkpoint(path, {"frame_model": teacher.frame_model, "aggregator": teacher.aggregator}, cfg.model, "teacher",
                    {"aggregator_config": vars(cfg.teacher.aggregator).copy(), "lambda_b": teacher.lambda_b})


def load_teacher(path, expect_config: ModelConfig | None = None) -> Teacher:
    from .teacher import AggregatorConfig

    payload = load_checkpoint(path, "teacher", expect_config)
    cfg = payload["model_config"]
    fm = VISModel(cfg)
    fm.load_state_dict(payload["state"]["frame_model"])
    agg = Aggregator(cfg, AggregatorConfig(**payload["extra"]["aggregator_config"]))
    agg.load_state_dict(payload["state"]["aggregator"])
    return Teacher(fm, agg, payload["extra"].get("lambda_b", 2.0))


# ------------------------------------------------------------------ student

@dataclass
class TrainState:
    model: VISModel
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    step: int = 0
    history: list[dict] = field(default_factory=list)


def make_state(model: VISModel, cfg: RunConfig) -> TrainState:
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    total = max(cfg.optim.steps, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))
    return TrainState(model, opt, sched)


def save_student(path, state: TrainState, cfg: RunConfig, stage: str) -> None:
    save_checkpoint(path, {"model": state.model}, cfg.model, "student",
                    {"optimizer": state.optimizer.state_dict(), "scheduler": state.scheduler.state_dict(),
                     "step": state.step, "stage": stage, "config": cfg.to_dict()})


def load_student(path, cfg: RunConfig | None = None, resume: bool = False) -> tuple[VISModel, dict]:
    payload = load_checkpoint(path, "student", cfg.model if cfg is not None else None)
    model = VISModel(payload["model_config"])
    model.load_state_dict(payload["state"]["model"])
    return model, payload["extra"]


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Data order and augmentation draws depend only on (seed, step)."""
    return np.random.default_rng([seed, step])


def sample_batch(dataset: list[VideoClip], cfg: RunConfig, step: int, augmenter: MinorPaste | None):
    rng = step_rng(cfg.seed, step)
    n = min(cfg.optim.clips_per_batch, len(dataset))
    picks = rng.choice(len(dataset), size=n, replace=False)
    batch = []
    for ci in picks:
        clip = dataset[int(ci)]
        augmented = False
        if augmenter is not None:
            new = augmenter(clip, rng)
            augmented = new is not clip
            clip = new
        ta, tb = rng.choice(clip.num_frames, size=2, replace=False)
        batch.append((clip, int(ta), int(tb), augmented))
    return batch


def student_losses(model: VISModel, batch, cfg: RunConfig, teacher: Teacher | None = None):
    """IDOL terms on 2 frames per clip, plus the distillation term when a teacher is given."""
    images = np.stack([clip.frames[t] for clip, ta, tb, _ in batch for t in (ta, tb)])
    out = model(VISModel.preprocess(images))
    w = cfg.loss
    cls_t, box_t, mask_t, emb_t, kd_t = [], [], [], [], []
    embed_skipped = kd_skipped = 0
    for b, (clip, ta, tb, augmented) in enumerate(batch):
        matched = []
        know = None
        if teacher is not None and w.lambda4 > 0:
            know = teacher.knowledge(clip, use_cache=not augmented)
        for j, t in enumerate((ta, tb)):
            i = 2 * b + j
            tg = frame_targets(clip, t)
            logits, boxes = out["class_logits"][i], out["boxes"][i]
            if know is not None and cfg.qfa.pairing == "index":
                # no filtering and no association: student query n learns from teacher query n, for every n
                every = np.arange(logits.shape[0])
                kd_t.append(kd_loss(*associate(every, every, out["embeddings"][i], know[0])[:2]))
            if len(tg["ids"]) == 0:
                cls_t.append(classification_loss(logits, np.zeros(0, np.int64), [], w.no_object_weight))
                matched.append((np.zeros(0, np.int64), []))
                continue
            S = cost_matrix(logits, boxes, tg["classes"], tg["boxes"], cfg.qfa.lambda_b)
            sigma = match(S, "hungarian").sigma
            cls_t.append(classification_loss(logits, sigma, tg["classes"], w.no_object_weight))
            box_t.append(box_loss(boxes, sigma, tg["boxes"]))
            mask_t.append(mask_loss(out["mask_logits"][i], sigma, tg["masks"]))
            matched.append((sigma, tg["ids"]))
            if know is not None and cfg.qfa.pairing == "qfa":
                t_emb, mapping = know
                s_sigma = sigma if cfg.qfa.mode == "hungarian" else match(S, cfg.qfa.mode).sigma
                keep = [m for m, iid in enumerate(tg["ids"]) if iid in mapping]
                pairs = associate(s_sigma[keep], [mapping[tg["ids"][m]] for m in keep], out["embeddings"][i], t_emb)
                if len(pairs.student_idx):
                    kd_t.append(kd_loss(pairs.student, pairs.teacher))
                else:
                    kd_skipped += 1
        (sa, ida), (sb, idb) = matched
        if len(ida) and len(idb) and set(ida) & set(idb):
            emb = out["embeddings"]
            emb_t.append(embed_loss(emb[2 * b][torch.as_tensor(sa)], ida, emb[2 * b + 1][torch.as_tensor(sb)], idb,
                                    w.embed_temperature))
        else:
            embed_skipped += 1
    zero = out["class_logits"].sum() * 0.0

    def mean(xs):
        return torch.stack(xs).mean() if xs else zero

    idol, parts = idol_loss(mean(cls_t), mean(box_t), mean(mask_t), mean(emb_t), w)
    kd = mean(kd_t)
    loss = total_loss(idol, kd, w.lambda4 if teacher is not None else 0.0)
    parts.update(kd=float(kd.detach()) + 0.0, total=float(loss.detach()), embed_skipped=embed_skipped, kd_skipped=kd_skipped)
    return loss, parts


def run_training(cfg: RunConfig, dataset: list[VideoClip], state: TrainState, stage: str,
                 teacher: Teacher | None = None, run_dir: Path | None = None, stop_at: int | None = None) -> TrainState:
    """Optimise until ``cfg.optim.steps`` (or ``stop_at``); appends one JSON line per step to run_dir/train_log.jsonl."""
    augmenter = MinorPaste(dataset, cfg.augment) if cfg.augment_enabled(stage) else None
    model = state.model
    model.train()
    log_fh = open(run_dir / "train_log.jsonl", "a") if run_dir is not None else None
    end = cfg.optim.steps if stop_at is None else min(stop_at, cfg.optim.steps)
    try:
        while state.step < end:
            batch = sample_batch(dataset, cfg, state.step, augmenter)
            loss, parts = student_losses(model, batch, cfg, teacher)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {state.step} of stage {stage}: {parts}")
            state.optimizer.zero_grad()
            loss.backward()
            if cfg.optim.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
            state.optimizer.step()
            state.scheduler.step()
            parts.update(step=state.step, stage=stage, lr=state.scheduler.get_last_lr()[0])
            state.history.append(parts)
            if log_fh is not None:
                log_fh.write(json.dumps(parts) + "\n")
            if state.step % cfg.optim.log_every == 0:
                log.info("%s step %d loss %.4f kd %.4f", stage, state.step, parts["total"], parts["kd"])
            state.step += 1
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return state


def train_baseline(cfg: RunConfig, dataset: list[VideoClip], init: VISModel | None = None,
                   run_dir: Path | None = None) -> TrainState:
    cfg.validate()
    model = init if init is not None else build_model(cfg.model, cfg.seed)
    state = make_state(model, cfg)
    return run_training(cfg, dataset, state, "baseline", None, run_dir)


def train_teacher(cfg: RunConfig, dataset: list[VideoClip], frame_model: VISModel,
                  run_dir: Path | None = None) -> tuple[Teacher, list[dict]]:
    freeze(frame_model)
    torch.manual_seed(cfg.seed)
    agg = Aggregator(cfg.model, cfg.teacher.aggregator, heads=frame_model.heads)
    for p in agg.parameters():
        p.requires_grad_(True)
    tcfg = TeacherTrainConfig(steps=cfg.teacher.steps, lr=cfg.teacher.lr, clips_per_batch=cfg.teacher.clips_per_batch,
                              frames_per_window=cfg.teacher.frames_per_window, lambda_b=cfg.qfa.lambda_b, weights=cfg.loss)
    log_fh = open(run_dir / "teacher_log.jsonl", "a") if run_dir is not None else None
    try:
        history = train_aggregator(dataset, frame_model, agg, tcfg, seed=cfg.seed,
                                   log_fn=(lambda p: log_fh.write(json.dumps(p) + "\n")) if log_fh else None)
    finally:
        if log_fh is not None:
            log_fh.close()
    return Teacher(frame_model, agg, cfg.qfa.lambda_b), history


def distill(cfg: RunConfig, dataset: list[VideoClip], student_init: VISModel, teacher: Teacher,
            run_dir: Path | None = None) -> TrainState:
    cfg.validate()
    if teacher.frame_model.cfg != student_init.cfg:
        raise ValidationError("teacher and student model configs differ", "model")
    before = teacher.fingerprint
    if cfg.loss.lambda4 > 0:
        teacher.warm(dataset)
    state = make_state(student_init, cfg)
    state = run_training(cfg, dataset, state, "distill", teacher, run_dir)
    if teacher.fingerprint != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return state


# ------------------------------------------------------------------ evaluation

def predict(model: VISModel, clips: list[VideoClip], tracker_cfg: TrackerConfig) -> dict:
    return {clip.clip_id: track_video(clip.frames, model, tracker_cfg) for clip in clips}


def evaluate(model: VISModel, clips: list[VideoClip], tracker_cfg: TrackerConfig) -> tuple[EvalResult, dict]:
    preds = predict(model, clips, tracker_cfg)
    return video_map(preds, clips), preds
