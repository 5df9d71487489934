"""Offline teacher: aggregates the frozen frame model's per-frame queries into video-level queries."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .losses import LossWeights, classification_loss, dice_loss, embed_loss, idol_loss
from .model import ModelConfig, PredictionHeads, VISModel, parameter_hash
from .qfa import box_cxcywh_to_xyxy, giou, match, video_cost_matrix
from .synthetic_video import VideoClip

log = logging.getLogger(__name__)


@dataclass
class AggregatorConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    temporal_encoding: bool = False
    max_frames: int = 64


@dataclass
class OfflineKnowledge:
    queries: torch.Tensor  # (N, C)
    embeddings: torch.Tensor  # (N, C), unit norm
    video_class_logits: torch.Tensor  # (N, N_c)
    per_frame_boxes: torch.Tensor  # (N, T, 4)
    per_frame_mask_logits: torch.Tensor | None = None  # (N, T, h, w)

    def detach(self) -> "OfflineKnowledge":
        m = self.per_frame_mask_logits
        return OfflineKnowledge(self.queries.detach(), self.embeddings.detach(), self.video_class_logits.detach(),
                                self.per_frame_boxes.detach(), None if m is None else m.detach())


class Aggregator(nn.Module):
    """Object encoder (self-attention over all T*N frame queries) + object decoder (N video queries)."""

    def __init__(self, model_cfg: ModelConfig, cfg: AggregatorConfig | None = None,
                 heads: PredictionHeads | None = None):
        super().__init__()
        self.model_cfg = model_cfg
        self.cfg = cfg or AggregatorConfig()
        C, H = model_cfg.hidden_dim, model_cfg.num_heads
        enc = nn.TransformerEncoderLayer(C, H, model_cfg.ffn_dim, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(enc, self.cfg.encoder_layers, enable_nested_tensor=False)
        dec = nn.TransformerDecoderLayer(C, H, model_cfg.ffn_dim, dropout=0.0, batch_first=True)
        self.decoder = nn.TransformerDecoder(dec, self.cfg.decoder_layers)
        self.video_queries = nn.Embedding(model_cfg.num_queries, C)
        self.frame_proj = nn.Linear(C, C)
        if self.cfg.temporal_encoding:
            self.time_embed = nn.Embedding(self.cfg.max_frames, C)
        self.heads = copy.deepcopy(heads) if heads is not None else PredictionHeads(model_cfg)

    def encode(self, frame_queries: torch.Tensor) -> torch.Tensor:
        """(B, T, N, C) -> (B, T, N, C)."""
        B, T, N, C = frame_queries.shape
        x = frame_queries
        if self.cfg.temporal_encoding:
            x = x + self.time_embed.weight[:T][None, :, None, :]
        return self.encoder(x.reshape(B, T * N, C)).reshape(B, T, N, C)

    def aggregate(self, frame_queries: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, N, C) or (T, N, C) frame queries -> (video queries (B, N, C), encoded tokens)."""
        if frame_queries.dim() == 3:
            frame_queries = frame_queries[None]
        B, T, N, C = frame_queries.shape
        if T == 0:
            raise ValidationError("cannot aggregate an empty frame sequence", "frame_queries")
        tokens = self.encode(frame_queries)
        q = self.video_queries.weight[None].expand(B, -1, -1)
        return self.decoder(q, tokens.reshape(B, T * N, C)), tokens

    def frame_queries_for(self, video_q: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Specialise each video query to every frame by attending over that frame's tokens -> (B, N, T, C)."""
        C = video_q.shape[-1]
        attn = torch.einsum("bnc,btkc->bntk", video_q, tokens) / math.sqrt(C)
        ctx = torch.einsum("bntk,btkc->bntc", attn.softmax(-1), tokens)
        return video_q[:, :, None, :] + self.frame_proj(ctx)

    def forward(self, frame_queries: torch.Tensor, mask_feats: torch.Tensor | None = None) -> dict:
        """frame_queries: (B, T, N, C); mask_feats: (B, T, K, h, w) from the frame model."""
        if frame_queries.dim() == 3:
            frame_queries = frame_queries[None]
            mask_feats = None if mask_feats is None else mask_feats[None]
        video_q, tokens = self.aggregate(frame_queries)
        B, T = frame_queries.shape[:2]
        N, C = video_q.shape[1:]
        fq = self.frame_queries_for(video_q, tokens)
        out = {
            "queries": video_q,
            "embeddings": self.heads.embed(video_q),
            "video_class_logits": self.heads.classify(video_q),
            "per_frame_boxes": self.heads.boxes(fq),
        }
        if mask_feats is not None:
            K, h, w = mask_feats.shape[2:]
            per_t = fq.transpose(1, 2).reshape(B * T, N, C)
            masks = self.heads.masks(per_t, mask_feats.reshape(B * T, K, h, w))
            out["per_frame_mask_logits"] = masks.reshape(B, T, N, h, w).transpose(1, 2)
        return out


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def frame_outputs(frame_model: VISModel, frames: np.ndarray, chunk: int = 32) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the frozen frame model on (T, H, W, 3) uint8 frames -> features (T, N, C), mask feats (T, K, h, w)."""
    feats, mfeats = [], []
    with torch.no_grad():
        for s in range(0, len(frames), chunk):
            x = VISModel.preprocess(frames[s:s + chunk])
            f, m = frame_model.extract_frame_queries(x)
            feats.append(f)
            mfeats.append(m)
    return torch.cat(feats), torch.cat(mfeats)


def build_offline_knowledge(video: VideoClip, frame_model: VISModel, aggregator: Aggregator,
                            with_masks: bool = False) -> OfflineKnowledge:
    """Video-level knowledge for a whole clip. The frame model runs without gradient."""
    if frame_model.training or any(p.requires_grad for p in frame_model.parameters()):
        freeze(frame_model)
    feats, mfeats = frame_outputs(frame_model, video.frames)
    out = aggregator(feats[None], mfeats[None] if with_masks else None)
    return OfflineKnowledge(
        out["queries"][0], out["embeddings"][0], out["video_class_logits"][0], out["per_frame_boxes"][0],
        out["per_frame_mask_logits"][0] if with_masks else None,
    )


# ------------------------------------------------------------------ training

@dataclass
class TeacherTrainConfig:
    steps: int = 1500
    lr: float = 1e-3
    clips_per_batch: int = 4
    frames_per_window: int = 4
    lambda_b: float = 2.0
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 50


def video_targets(clip: VideoClip, frame_idx) -> dict:
    """GT tracks restricted to the sampled frames; tracks invisible on all of them are dropped."""
    keep = [tr for tr in clip.instances if tr.visible[frame_idx].any()]
    return {
        "ids": [tr.instance_id for tr in keep],
        "classes": np.array([tr.class_id for tr in keep], dtype=np.int64),
        "boxes": np.stack([tr.boxes[frame_idx] for tr in keep]) if keep else np.zeros((0, len(frame_idx), 4)),
        "visible": np.stack([tr.visible[frame_idx] for tr in keep]) if keep else np.zeros((0, len(frame_idx)), bool),
        "masks": np.stack([tr.masks[frame_idx] for tr in keep]) if keep else None,
    }


def video_level_losses(out: dict, b: int, tgt: dict, lambda_b: float, no_object_weight: float):
    """Class, frame-averaged box and frame-averaged mask losses for one clip of a batched aggregator output."""
    from .losses import downsample_masks

    logits = out["video_class_logits"][b]
    M = len(tgt["ids"])
    if M == 0:
        zero = logits.sum() * 0.0
        return classification_loss(logits, np.zeros(0, np.int64), [], no_object_weight), zero, zero, np.zeros(0, np.int64)
    boxes = out["per_frame_boxes"][b]
    S = video_cost_matrix(logits, boxes, tgt["classes"], tgt["boxes"], tgt["visible"], lambda_b)
    sigma = match(S, "hungarian").sigma
    cls = classification_loss(logits, sigma, tgt["classes"], no_object_weight)
    box_terms, mask_terms = [], []
    mask_logits = out.get("per_frame_mask_logits")
    for m in range(M):
        ts = np.flatnonzero(tgt["visible"][m])
        p = boxes[sigma[m], ts]
        g = torch.as_tensor(tgt["boxes"][m, ts], dtype=p.dtype)
        l1 = (p - g).abs().sum(-1)
        gl = 1.0 - giou(box_cxcywh_to_xyxy(p), box_cxcywh_to_xyxy(g))
        box_terms.append((l1 + gl).mean())
        if mask_logits is not None:
            ml = mask_logits[b, sigma[m], ts]
            gm = downsample_masks(tgt["masks"][m, ts], ml.shape[-2:]).to(ml)
            bce = F.binary_cross_entropy_with_logits(ml, gm, reduction="none").flatten(1).mean(1)
            mask_terms.append((dice_loss(ml, gm) + bce).mean())
    box = torch.stack(box_terms).mean()
    mask = torch.stack(mask_terms).mean() if mask_terms else box * 0.0
    return cls, box, mask, sigma


def sample_windows(rng: np.random.Generator, T: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Two sorted frame windows of ``size`` frames; the first from the early half, the second from the late half."""
    size = min(size, T)
    half = max(T // 2, size)
    a = np.sort(rng.choice(min(half, T), size=size, replace=False))
    lo = T - half if T - half >= 0 else 0
    b = np.sort(lo + rng.choice(T - lo, size=size, replace=False))
    return a, b


def train_aggregator(dataset: list[VideoClip], frame_model: VISModel, aggregator: Aggregator,
                     cfg: TeacherTrainConfig, seed: int = 0, log_fn=None) -> list[dict]:
    """Train only the aggregator (and its own heads) against the video-level set-prediction loss."""
    freeze(frame_model)
    before = parameter_hash(frame_model)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.AdamW(aggregator.parameters(), lr=cfg.lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, cfg.steps) / cfg.steps)))
    aggregator.train()
    w = cfg.weights
    history = []
    for step in range(cfg.steps):
        batch = rng.choice(len(dataset), size=min(cfg.clips_per_batch, len(dataset)), replace=False)
        windows, feats, mfeats = [], [], []
        for ci in batch:
            clip = dataset[ci]
            wa, wb = sample_windows(rng, clip.num_frames, cfg.frames_per_window)
            f, m = frame_outputs(frame_model, clip.frames[np.concatenate([wa, wb])])
            windows.append((clip, wa, wb))
            feats += [f[:len(wa)], f[len(wa):]]
            mfeats += [m[:len(wa)], m[len(wa):]]
        out = aggregator(torch.stack(feats), torch.stack(mfeats))
        cls_t, box_t, mask_t, emb_t = [], [], [], []
        for i, (clip, wa, wb) in enumerate(windows):
            tg = [video_targets(clip, wa), video_targets(clip, wb)]
            sig = []
            for j in range(2):
                c, bx, mk, s = video_level_losses(out, 2 * i + j, tg[j], cfg.lambda_b, w.no_object_weight)
                cls_t.append(c)
                box_t.append(bx)
                mask_t.append(mk)
                sig.append(s)
            ea = out["embeddings"][2 * i][torch.as_tensor(sig[0], dtype=torch.long)]
            eb = out["embeddings"][2 * i + 1][torch.as_tensor(sig[1], dtype=torch.long)]
            emb_t.append(embed_loss(ea, tg[0]["ids"], eb, tg[1]["ids"], w.embed_temperature))
        loss, parts = idol_loss(torch.stack(cls_t).mean(), torch.stack(box_t).mean(), torch.stack(mask_t).mean(),
                                torch.stack(emb_t).mean(), w)
        if not torch.isfinite(loss):
            from .errors import DivergenceError

            raise DivergenceError(f"non-finite teacher loss at step {step}: {parts}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(aggregator.parameters(), 1.0)
        opt.step()
        sched.step()
        parts["step"] = step
        history.append(parts)
        if log_fn is not None:
            log_fn(parts)
        if step % cfg.log_every == 0:
            log.info("teacher step %d loss %.4f", step, parts["idol"])
    aggregator.eval()
    if parameter_hash(frame_model) != before:
        raise RuntimeError("frame model parameters changed during aggregator training")
    return history
