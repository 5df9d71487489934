"""Query filtering and association.

Predictions are matched to ground truth with a class + GIoU cost; the
student and teacher queries that land on the same ground-truth instance are
paired for distillation, and every unmatched query is dropped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError

METHODS = ("hungarian", "argmin")


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def _check_area(boxes: torch.Tensor, name: str) -> None:
    if boxes.numel() and ((boxes[..., 2] <= boxes[..., 0]) | (boxes[..., 3] <= boxes[..., 1])).any():
        raise ValidationError("zero-area box", name)


def giou(box_a, box_b) -> torch.Tensor:
    """Generalized IoU of corresponding xyxy boxes (broadcasting over leading dims)."""
    a = torch.as_tensor(box_a, dtype=torch.float64) if not torch.is_tensor(box_a) else box_a
    b = torch.as_tensor(box_b, dtype=torch.float64) if not torch.is_tensor(box_b) else box_b
    _check_area(a, "box_a")
    _check_area(b, "box_b")
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = area_a + area_b - inter
    iou = inter / union
    hull = (torch.maximum(a[..., 2:], b[..., 2:]) - torch.minimum(a[..., :2], b[..., :2])).prod(-1)
    return iou - (hull - union) / hull


def pairwise_giou(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """(N, 4) x (M, 4) xyxy -> (N, M)."""
    return giou(boxes_a[:, None, :], boxes_b[None, :, :])


def class_cost(logits, gt_class: int) -> torch.Tensor:
    """Cross entropy of one prediction against one ground-truth class."""
    logits = torch.as_tensor(logits)
    if not 0 <= int(gt_class) < logits.shape[-1]:
        raise ValidationError(f"class {gt_class} outside [0, {logits.shape[-1]})", "gt_class")
    return -F.log_softmax(logits, dim=-1)[..., int(gt_class)]


@dataclass
class CostMatrix:
    S: np.ndarray  # (N, M)
    lambda_b: float


def _as_float(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t if t.is_floating_point() else t.double()


def cost_matrix(class_logits, boxes, gt_classes, gt_boxes, lambda_b: float = 2.0) -> CostMatrix:
    """S[n, m] = CE(class_logits[n], gt_classes[m]) + lambda_b * (1 - GIoU(boxes[n], gt_boxes[m])).

    Boxes are normalized (cx, cy, w, h).
    """
    class_logits = _as_float(class_logits).detach()
    boxes = _as_float(boxes).detach()
    gt_boxes = _as_float(gt_boxes).detach().to(boxes.dtype)
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long)
    if class_logits.shape[0] != boxes.shape[0] or gt_classes.shape[0] != gt_boxes.shape[0]:
        raise ValidationError("prediction / ground-truth length mismatch", "cost_matrix")
    if class_logits.shape[0] < 1 or gt_classes.shape[0] < 1:
        raise ValidationError("need N >= 1 and M >= 1", "cost_matrix")
    if gt_classes.min() < 0 or gt_classes.max() >= class_logits.shape[1]:
        raise ValidationError("ground-truth class out of range", "gt_classes")
    ce = -F.log_softmax(class_logits, dim=-1)[:, gt_classes]
    box = 1.0 - pairwise_giou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    S = ce.double() + lambda_b * box.double()
    return CostMatrix(S.cpu().numpy(), lambda_b)


def video_cost_matrix(video_class_logits, frame_boxes, gt_classes, gt_boxes, gt_visible, lambda_b: float = 2.0) -> CostMatrix:
    """Teacher-side cost: video-level class CE plus box cost averaged over each GT track's visible frames.

    frame_boxes: (N, T, 4); gt_boxes: (M, T, 4); gt_visible: (M, T) bool.
    """
    logits = _as_float(video_class_logits).detach()
    fb = _as_float(frame_boxes).detach().double()
    gb = _as_float(gt_boxes).detach().double()
    vis = torch.as_tensor(gt_visible, dtype=torch.bool)
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long)
    N, T = fb.shape[:2]
    M = gt_classes.shape[0]
    if M < 1:
        raise ValidationError("need M >= 1", "cost_matrix")
    ce = -F.log_softmax(logits.double(), dim=-1)[:, gt_classes]
    box = torch.zeros(N, M, dtype=torch.float64)
    pa = box_cxcywh_to_xyxy(fb)
    for m in range(M):
        ts = torch.nonzero(vis[m]).flatten()
        if ts.numel() == 0:
            continue
        pb = box_cxcywh_to_xyxy(gb[m, ts])  # (V, 4)
        g = giou(pa[:, ts, :], pb[None])  # (N, V)
        box[:, m] = (1.0 - g).mean(dim=1)
    return CostMatrix((ce + lambda_b * box).numpy(), lambda_b)


@dataclass
class Assignment:
    sigma: np.ndarray  # (M,) query index per ground-truth instance
    method: str

    @property
    def kept(self) -> np.ndarray:
        """Queries that survive filtering: the image of sigma."""
        return np.unique(self.sigma)

    def __len__(self) -> int:
        return len(self.sigma)


def match(S, method: str = "hungarian") -> Assignment:
    if isinstance(S, CostMatrix):
        S = S.S
    S = np.asarray(S, dtype=np.float64)
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}", "qfa.mode")
    N, M = S.shape
    if M == 0:
        return Assignment(np.zeros(0, dtype=np.int64), method)
    if not np.all(np.isfinite(S)):
        raise ValidationError("cost matrix has non-finite entries", "S")
    if method == "argmin":
        return Assignment(np.argmin(S, axis=0).astype(np.int64), method)
    if N < M:
        raise ValidationError(f"hungarian matching needs N >= M, got N={N}, M={M}", "S")
    rows, cols = linear_sum_assignment(S)
    sigma = np.empty(M, dtype=np.int64)
    sigma[cols] = rows
    return Assignment(sigma, method)


class Pairs(NamedTuple):
    student: torch.Tensor  # (M, C)
    teacher: torch.Tensor  # (M, C)
    student_idx: np.ndarray
    teacher_idx: np.ndarray


def associate(sigma_online, sigma_offline, online_embeddings: torch.Tensor, offline_embeddings: torch.Tensor) -> Pairs:
    """Pair the student query matched to GT m with the teacher query matched to GT m."""
    so = np.asarray(getattr(sigma_online, "sigma", sigma_online), dtype=np.int64)
    sf = np.asarray(getattr(sigma_offline, "sigma", sigma_offline), dtype=np.int64)
    if so.shape != sf.shape:
        raise ValidationError(f"assignment lengths differ: {so.shape[0]} vs {sf.shape[0]}", "sigma")
    idx_s = torch.as_tensor(so, dtype=torch.long, device=online_embeddings.device)
    idx_t = torch.as_tensor(sf, dtype=torch.long, device=offline_embeddings.device)
    return Pairs(online_embeddings[idx_s], offline_embeddings[idx_t], so, sf)
