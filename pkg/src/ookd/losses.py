"""Training objectives: set-prediction terms, two-frame contrastive embedding loss, cosine distillation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .qfa import box_cxcywh_to_xyxy, giou


@dataclass
class LossWeights:
    lambda1: float = 2.0  # box
    lambda2: float = 2.0  # mask
    lambda3: float = 1.0  # embed
    lambda4: float = 1.0  # distillation
    no_object_weight: float = 0.1
    embed_temperature: float = 0.1

    def validate(self) -> None:
        from .errors import ValidationError

        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "no_object_weight"):
            if getattr(self, name) < 0:
                raise ValidationError("must be >= 0", f"loss.{name}")
        if self.embed_temperature <= 0:
            raise ValidationError("must be > 0", "loss.embed_temperature")


def _idx(sigma, device) -> torch.Tensor:
    return torch.as_tensor(np.asarray(getattr(sigma, "sigma", sigma)), dtype=torch.long, device=device)


def classification_loss(class_logits: torch.Tensor, sigma, gt_classes, no_object_weight: float = 0.1) -> torch.Tensor:
    """Weighted CE: matched queries toward their GT class, the rest toward the last (no-object) slot."""
    N, K = class_logits.shape
    idx = _idx(sigma, class_logits.device)
    target = torch.full((N,), K - 1, dtype=torch.long, device=class_logits.device)
    target[idx] = torch.as_tensor(gt_classes, dtype=torch.long, device=class_logits.device)
    w = torch.full((N,), no_object_weight, dtype=class_logits.dtype, device=class_logits.device)
    w[idx] = 1.0
    ce = F.cross_entropy(class_logits, target, reduction="none")
    return (w * ce).sum() / w.sum()


def box_loss(pred_boxes: torch.Tensor, sigma, gt_boxes) -> torch.Tensor:
    """L1 + (1 - GIoU) over matched pairs, averaged over M. Boxes are (cx, cy, w, h)."""
    idx = _idx(sigma, pred_boxes.device)
    if idx.numel() == 0:
        return pred_boxes.sum() * 0.0
    p = pred_boxes[idx]
    g = torch.as_tensor(gt_boxes, dtype=p.dtype, device=p.device)
    l1 = (p - g).abs().sum(-1)
    gl = 1.0 - giou(box_cxcywh_to_xyxy(p), box_cxcywh_to_xyxy(g))
    return (l1 + gl).mean()


def downsample_masks(masks, size: tuple[int, int]) -> torch.Tensor:
    """Area-average binary (M, H, W) masks to soft (M, h, w) targets."""
    m = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    if m.shape[-2:] == tuple(size):
        return m
    return F.adaptive_avg_pool2d(m[:, None], size)[:, 0]


def dice_loss(logits: torch.Tensor, targets: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-mask 1 - 2*sum(p*t) / (sum(p^2) + sum(t^2))."""
    p = logits.sigmoid().flatten(1)
    t = targets.flatten(1)
    num = 2 * (p * t).sum(1)
    den = (p * p).sum(1) + (t * t).sum(1)
    return 1 - num / (den + eps)


def mask_loss(mask_logits: torch.Tensor, sigma, gt_masks) -> torch.Tensor:
    """Dice + BCE on matched pairs at the logits' resolution; GT masks with no pixels are skipped."""
    idx = _idx(sigma, mask_logits.device)
    if idx.numel() == 0:
        return mask_logits.sum() * 0.0
    targets = downsample_masks(gt_masks, mask_logits.shape[-2:]).to(mask_logits)
    keep = targets.flatten(1).sum(1) > 0
    if not keep.any():
        return mask_logits.sum() * 0.0
    logits = mask_logits[idx][keep]
    targets = targets[keep]
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none").flatten(1).mean(1)
    return (dice_loss(logits, targets) + bce).mean()


def embed_loss(emb_a: torch.Tensor, ids_a, emb_b: torch.Tensor, ids_b, temperature: float = 0.1) -> torch.Tensor:
    """Symmetric two-frame contrastive loss over GT-matched query embeddings.

    For each instance visible in both frames the positive is its own embedding
    in the other frame; every other matched embedding there is a negative.
    Returns 0 when the frames share no instance.
    """
    ids_a = [int(i) for i in ids_a]
    ids_b = [int(i) for i in ids_b]
    shared = [i for i in ids_a if i in ids_b]
    if not shared:
        return (emb_a.sum() + emb_b.sum()) * 0.0
    pos_a = torch.as_tensor([ids_a.index(i) for i in shared], device=emb_a.device)
    pos_b = torch.as_tensor([ids_b.index(i) for i in shared], device=emb_b.device)
    logits_ab = emb_a[pos_a] @ emb_b.T / temperature
    logits_ba = emb_b[pos_b] @ emb_a.T / temperature
    return 0.5 * (F.cross_entropy(logits_ab, pos_b) + F.cross_entropy(logits_ba, pos_a))


def kd_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean (1 - cosine) between paired student and teacher embeddings; teacher side is detached.

    With no pairs the loss is 0 (distillation skipped).
    """
    if student.shape[0] == 0:
        return student.sum() * 0.0
    cos = F.cosine_similarity(student, teacher.detach(), dim=-1, eps=1e-12)
    return (1.0 - cos).mean()


def idol_loss(cls, box, mask, embed, weights: LossWeights) -> tuple[torch.Tensor, dict]:
    total = cls + weights.lambda1 * box + weights.lambda2 * mask + weights.lambda3 * embed
    breakdown = {name: float(torch.as_tensor(v).detach()) for name, v in
                 (("cls", cls), ("box", box), ("mask", mask), ("embed", embed), ("idol", total))}
    return total, breakdown


def total_loss(idol: torch.Tensor, kd: torch.Tensor, lambda4: float) -> torch.Tensor:
    if lambda4 == 0:
        return idol
    return idol + lambda4 * kd
