"""Online inference: per-frame detection, memory-bank embedding matching, instance IDs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .masks import rle_decode, rle_encode
from .model import VISModel


@dataclass
class TrackerConfig:
    conf_threshold: float = 0.5
    spawn_threshold: float = 0.3  # minimum cosine similarity to continue a track
    momentum: float = 0.75  # retention weight of the stored embedding
    retire_after: int = 10  # frames an entry may go unseen before it is dropped
    max_overlap: float = 0.5  # drop a detection losing more than this fraction of its mask to higher-scored ones
    min_area: int = 4


@dataclass
class Detection:
    class_id: int
    score: float
    box: np.ndarray
    mask: np.ndarray  # (H, W) bool
    embedding: np.ndarray  # (C,) unit norm
    class_probs: np.ndarray | None = None


@dataclass
class MemoryEntry:
    instance_id: int
    embedding: np.ndarray
    last_seen: int


@dataclass
class MemoryBank:
    entries: list[MemoryEntry] = field(default_factory=list)
    next_id: int = 0

    def copy(self) -> "MemoryBank":
        return MemoryBank([MemoryEntry(e.instance_id, e.embedding.copy(), e.last_seen) for e in self.entries], self.next_id)


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), 1e-12)


def detect(class_logits, boxes, mask_logits, embeddings, conf_threshold: float, image_size: tuple[int, int] | None = None,
           max_overlap: float = 1.0, min_area: int = 4) -> list[Detection]:
    """Keep queries whose best object-class probability reaches the threshold.

    Masks are upsampled to ``image_size`` and pixel conflicts go to the higher
    score. With ``max_overlap < 1`` detections left with too little of their
    own mask are dropped as duplicates.
    """
    logits = torch.as_tensor(class_logits).double()
    probs = logits.softmax(-1)[:, :-1]
    scores, classes = probs.max(-1)
    keep = torch.nonzero(scores >= conf_threshold).flatten()
    if keep.numel() == 0:
        return []
    ml = torch.as_tensor(mask_logits)[keep].float()
    if image_size is not None and tuple(ml.shape[-2:]) != tuple(image_size):
        ml = F.interpolate(ml[:, None], size=image_size, mode="bilinear", align_corners=False)[:, 0]
    masks = (ml > 0).numpy()
    order = np.argsort(-scores[keep].numpy(), kind="stable")
    taken = np.zeros(masks.shape[1:], dtype=bool)
    emb = torch.as_tensor(embeddings)
    out = []
    for j in order:
        q = int(keep[j])
        m = masks[j]
        area = int(m.sum())
        own = m & ~taken
        if max_overlap < 1.0 and (own.sum() < min_area or own.sum() < (1 - max_overlap) * area):
            continue
        taken |= own
        out.append(Detection(int(classes[q]), float(scores[q]), np.asarray(boxes[q], dtype=np.float64), own,
                             _normalize(emb[q].double().numpy()), probs[q].numpy()))
    return out


def assign_ids(detections: list[Detection], memory: MemoryBank, frame_index: int = 0,
               spawn_threshold: float = 0.3, momentum: float = 0.75, retire_after: int | None = None):
    """Hungarian matching of detections to memory entries on cosine similarity.

    Returns (ids, updated memory); the input memory is not modified.
    """
    mem = memory.copy()
    if retire_after is not None:
        mem.entries = [e for e in mem.entries if frame_index - e.last_seen <= retire_after]
    ids = [-1] * len(detections)
    if detections and mem.entries:
        D = np.stack([d.embedding for d in detections])
        E = np.stack([e.embedding for e in mem.entries])
        sim = D @ E.T
        rows, cols = linear_sum_assignment(-sim)
        for r, c in zip(rows, cols):
            if sim[r, c] < spawn_threshold:
                continue
            entry = mem.entries[c]
            ids[r] = entry.instance_id
            entry.embedding = _normalize(momentum * entry.embedding + (1 - momentum) * detections[r].embedding)
            entry.last_seen = frame_index
    for r, d in enumerate(detections):
        if ids[r] == -1:
            ids[r] = mem.next_id
            mem.entries.append(MemoryEntry(mem.next_id, d.embedding.copy(), frame_index))
            mem.next_id += 1
    return ids, mem


@dataclass
class TrackResult:
    instance_id: int
    class_id: int
    score: float
    masks: np.ndarray  # (T, H, W) bool


def _finalize(per_frame: list[list[tuple[int, Detection]]], T: int, H: int, W: int, num_classes: int) -> list[TrackResult]:
    tracks: dict[int, dict] = {}
    for t, dets in enumerate(per_frame):
        for iid, d in dets:
            tr = tracks.setdefault(iid, {"masks": np.zeros((T, H, W), dtype=bool), "votes": np.zeros(num_classes), "scores": []})
            tr["masks"][t] = d.mask
            tr["votes"][d.class_id] += d.score
            tr["scores"].append(d.score)
    out = []
    for iid in sorted(tracks):
        tr = tracks[iid]
        out.append(TrackResult(iid, int(np.argmax(tr["votes"])), float(np.mean(tr["scores"])), tr["masks"]))
    return out


def track_video(frames: np.ndarray, model: VISModel, cfg: TrackerConfig, return_frames: bool = False):
    """Causal frame-by-frame tracking of a (T, H, W, 3) uint8 clip.

    Returns the finished tracks; with ``return_frames`` also the per-frame
    (instance_id, Detection) lists, which depend only on frames <= t.
    """
    model.eval()
    T, H, W = frames.shape[:3]
    memory = MemoryBank()
    per_frame = []
    with torch.no_grad():
        for t in range(T):
            out = model(VISModel.preprocess(frames[t:t + 1]))
            dets = detect(out["class_logits"][0], out["boxes"][0].numpy(), out["mask_logits"][0], out["embeddings"][0],
                          cfg.conf_threshold, (H, W), cfg.max_overlap, cfg.min_area)
            ids, memory = assign_ids(dets, memory, t, cfg.spawn_threshold, cfg.momentum, cfg.retire_after)
            per_frame.append(list(zip(ids, dets)))
    tracks = _finalize(per_frame, T, H, W, model.cfg.num_classes)
    return (tracks, per_frame) if return_frames else tracks


def tracks_to_json(clip_id: str, tracks: list[TrackResult]) -> dict:
    return {
        "clip_id": clip_id,
        "tracks": [
            {"instance_id": tr.instance_id, "class_id": tr.class_id, "score": tr.score,
             "masks": [rle_encode(m) for m in tr.masks]}
            for tr in tracks
        ],
    }


def tracks_from_json(doc: dict) -> list[TrackResult]:
    return [TrackResult(int(t["instance_id"]), int(t["class_id"]), float(t["score"]),
                        np.stack([rle_decode(m) for m in t["masks"]])) for t in doc["tracks"]]


def save_results(path, clip_id: str, tracks: list[TrackResult]) -> None:
    with open(path, "w") as fh:
        json.dump(tracks_to_json(clip_id, tracks), fh)


def load_results(path) -> tuple[str, list[TrackResult]]:
    with open(Path(path)) as fh:
        doc = json.load(fh)
    return doc["clip_id"], tracks_from_json(doc)
