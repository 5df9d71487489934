"""Video AP/AR over mask-sequence IoU, and the same-instance embedding similarity histogram."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ValidationError
from .model import VISModel
from .qfa import cost_matrix, match
from .synthetic_video import VideoClip
from .tracker import TrackResult

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _pad(masks: np.ndarray, T: int) -> np.ndarray:
    if masks.shape[0] >= T:
        return masks
    pad = np.zeros((T - masks.shape[0],) + masks.shape[1:], dtype=bool)
    return np.concatenate([masks, pad])


def sequence_iou(pred_masks, gt_masks) -> float:
    """Spatio-temporal IoU: summed per-frame intersections over summed per-frame unions."""
    p = np.asarray(pred_masks, dtype=bool)
    g = np.asarray(gt_masks, dtype=bool)
    T = max(p.shape[0], g.shape[0])
    p, g = _pad(p, T), _pad(g, T)
    if p.shape != g.shape:
        raise ValidationError(f"mask shapes differ: {p.shape} vs {g.shape}", "masks")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(p, g).sum() / union)


def sequence_iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    T = max(max(m.shape[0] for m in preds), max(m.shape[0] for m in gts))
    # float64 keeps pixel counts exact, so IoUs land on thresholds like 0.9 without rounding below them
    P = np.stack([_pad(np.asarray(m, bool), T).ravel() for m in preds]).astype(np.float64)
    G = np.stack([_pad(np.asarray(m, bool), T).ravel() for m in gts]).astype(np.float64)
    inter = P @ G.T
    union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return iou


@dataclass
class EvalResult:
    mAP: float
    AP50: float
    AP75: float
    AR1: float
    AR10: float
    ap_per_threshold: dict[float, float]
    per_class: dict[int, float]
    matched: int
    missed: int
    false_tracks: int
    monotone: bool = True

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP, "AP50": self.AP50, "AP75": self.AP75, "AR1": self.AR1, "AR10": self.AR10,
            "ap_per_threshold": {str(k): v for k, v in self.ap_per_threshold.items()},
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "matched": self.matched, "missed": self.missed, "false_tracks": self.false_tracks,
            "monotone": self.monotone,
        }


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a score-sorted TP/FP flag sequence."""
    if num_gt == 0:
        raise ValueError("num_gt must be positive")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def _greedy_match(ious: np.ndarray, threshold: float) -> np.ndarray:
    """ious: (P, G) for predictions already in descending score order. Returns TP flags."""
    P, G = ious.shape
    taken = np.zeros(G, dtype=bool)
    tp = np.zeros(P, dtype=bool)
    for i in range(P):
        best, best_j = threshold, -1
        for j in range(G):
            if taken[j]:
                continue
            if ious[i, j] >= best:
                best, best_j = ious[i, j], j
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
    return tp


def _gt_tracks(gt) -> list[tuple[int, np.ndarray]]:
    if isinstance(gt, VideoClip):
        return [(tr.class_id, tr.masks) for tr in gt.instances if tr.masks.any()]
    return [(int(c), m) for c, m in gt]


def video_map(predictions: Mapping[str, Sequence[TrackResult]], ground_truth: Mapping[str, VideoClip] | Sequence[VideoClip],
              iou_thresholds: Sequence[float] = IOU_THRESHOLDS, max_dets: Sequence[int] = (1, 10),
              classes: Sequence[int] | None = None) -> EvalResult:
    """Class-aware video AP/AR pooled over all videos.

    ground_truth maps clip id -> VideoClip (a list of clips is keyed by clip_id).
    Predictions for unknown clip ids are an error. Classes without any GT track
    are left out of the averages, and tracks with all-empty masks are ignored
    on both sides.
    """
    if not isinstance(ground_truth, Mapping):
        ground_truth = {c.clip_id: c for c in ground_truth}
    unknown = set(predictions) - set(ground_truth)
    if unknown:
        raise ValidationError(f"predictions for unknown clips {sorted(unknown)[:5]}", "predictions")
    thresholds = [float(t) for t in iou_thresholds]

    # per video: class -> (scores, ious to GT of that class)
    per_video = {}
    gt_count: dict[int, int] = {}
    for vid, gt in ground_truth.items():
        gts = _gt_tracks(gt)
        preds = list(predictions.get(vid, []))
        for tr in preds:
            if not hasattr(tr, "masks") or not hasattr(tr, "score"):
                raise ValidationError("prediction lacks masks/score", "predictions")
        # a track without a single pixel is not a detection, mirroring the GT side
        preds = [tr for tr in preds if np.asarray(tr.masks).any()]
        entry = {}
        cls_set = {c for c, _ in gts} | {tr.class_id for tr in preds}
        for c in cls_set:
            g = [m for cc, m in gts if cc == c]
            p = sorted([tr for tr in preds if tr.class_id == c], key=lambda tr: -tr.score)
            entry[c] = (np.array([tr.score for tr in p]), sequence_iou_matrix([tr.masks for tr in p], g), len(g))
            gt_count[c] = gt_count.get(c, 0) + len(g)
        per_video[vid] = entry

    eval_classes = sorted(c for c, n in gt_count.items() if n > 0)
    if classes is not None:
        eval_classes = [c for c in eval_classes if c in set(classes)]
    if not eval_classes:
        zero = {t: 0.0 for t in thresholds}
        return EvalResult(0.0, 0.0, 0.0, 0.0, 0.0, zero, {}, 0, 0, 0, True)

    ap = np.zeros((len(eval_classes), len(thresholds)))
    ar = np.zeros((len(max_dets), len(eval_classes), len(thresholds)))
    matched = missed = false_tracks = 0
    for ci, c in enumerate(eval_classes):
        for ti, thr in enumerate(thresholds):
            scores, flags = [], []
            hits = np.zeros(len(max_dets))
            for vid in per_video:
                if c not in per_video[vid]:
                    continue
                s, ious, ng = per_video[vid][c]
                if s.size == 0:
                    continue
                tp = _greedy_match(ious, thr) if ng else np.zeros(len(s), dtype=bool)
                scores.append(s)
                flags.append(tp)
                for ki, k in enumerate(max_dets):
                    topk = _greedy_match(ious[:k], thr) if ng else np.zeros(min(k, len(s)), bool)
                    hits[ki] += topk.sum()
            if scores:
                s = np.concatenate(scores)
                f = np.concatenate(flags)
                order = np.argsort(-s, kind="stable")
                f = f[order]
            else:
                f = np.zeros(0, dtype=bool)
            ap[ci, ti] = interpolated_ap(f, gt_count[c])
            ar[:, ci, ti] = hits / gt_count[c]
            if ti == 0:
                matched += int(f.sum())
                false_tracks += int((~f).sum())
                missed += gt_count[c] - int(f.sum())

    per_thr = ap.mean(axis=0)
    monotone = bool(np.all(np.diff(per_thr) <= 1e-12)) and bool(np.all(np.diff(ap, axis=1) <= 1e-12))
    if not monotone:
        log.warning("AP is not monotone in the IoU threshold: %s", per_thr)

    def at(t):
        return float(per_thr[thresholds.index(t)]) if t in thresholds else float("nan")

    k_index = {k: i for i, k in enumerate(max_dets)}
    return EvalResult(
        mAP=float(ap.mean()),
        AP50=at(0.5),
        AP75=at(0.75),
        AR1=float(ar[k_index[1]].mean()) if 1 in k_index else float("nan"),
        AR10=float(ar[k_index[10]].mean()) if 10 in k_index else float("nan"),
        ap_per_threshold={t: float(v) for t, v in zip(thresholds, per_thr)},
        per_class={c: float(ap[i].mean()) for i, c in enumerate(eval_classes)},
        matched=matched, missed=missed, false_tracks=false_tracks, monotone=monotone,
    )


# ---------------------------------------------------------------- similarity

@dataclass
class SimilarityHistogram:
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    values: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "edges": self.edges.tolist(), "mean": self.mean, "num_pairs": int(self.values.size)}


def matched_embeddings(model: VISModel, clip: VideoClip, lambda_b: float = 2.0) -> dict[int, dict[int, np.ndarray]]:
    """instance_id -> {frame: embedding of the query matched to it on that frame}."""
    model.eval()
    with torch.no_grad():
        out = model(VISModel.preprocess(clip.frames))
    result: dict[int, dict[int, np.ndarray]] = {}
    for t in range(clip.num_frames):
        vis = [tr for tr in clip.instances if tr.visible[t]]
        if not vis:
            continue
        S = cost_matrix(out["class_logits"][t], out["boxes"][t], [tr.class_id for tr in vis],
                        np.stack([tr.boxes[t] for tr in vis]), lambda_b)
        sigma = match(S, "hungarian").sigma
        emb = out["embeddings"][t].double().numpy()
        for tr, q in zip(vis, sigma):
            result.setdefault(tr.instance_id, {})[t] = emb[q]
    return result


def similarity_histogram(model: VISModel, dataset: Sequence[VideoClip], num_videos: int = 100, bins: int = 40,
                         seed: int = 0, pairs_per_instance: int = 5, lambda_b: float = 2.0) -> SimilarityHistogram:
    """Cosine similarity between GT-matched embeddings of one instance on two different frames."""
    rng = np.random.default_rng(seed)
    n = min(num_videos, len(dataset))
    picks = rng.choice(len(dataset), size=n, replace=False) if n < len(dataset) else np.arange(len(dataset))
    values = []
    for vi in picks:
        per_inst = matched_embeddings(model, dataset[int(vi)], lambda_b)
        for iid in sorted(per_inst):
            frames = sorted(per_inst[iid])
            if len(frames) < 2:
                continue
            pairs = [(a, b) for i, a in enumerate(frames) for b in frames[i + 1:]]
            chosen = rng.choice(len(pairs), size=min(pairs_per_instance, len(pairs)), replace=False)
            for j in chosen:
                a, b = pairs[int(j)]
                ea, eb = per_inst[iid][a], per_inst[iid][b]
                values.append(float(ea @ eb / max(np.linalg.norm(ea) * np.linalg.norm(eb), 1e-12)))
    values = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    counts, edges = np.histogram(values, bins=bins, range=(-1.0, 1.0))
    return SimilarityHistogram(counts, edges, float(values.mean()) if values.size else float("nan"), values)
