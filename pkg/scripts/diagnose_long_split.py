"""Separate segmentation errors from association errors for a trained student.

Reports tracker mAP next to an oracle-association mAP, where every per-frame
detection is handed to the ground-truth instance it overlaps most. A large gap
between the two points at the embeddings; a low oracle score points at the
per-frame masks or classes.

It also reports how often an object keeps its query slot between two frames of
a training clip. When slots are stable, pairing student and teacher queries by
raw index already gives each object a consistent target.

    python3 scripts/diagnose_long_split.py runs/desk/seed_0/pretrain_<hash>.ckpt
"""
import argparse

import numpy as np
import torch

from ookd.evalkit import video_map
from ookd.experiment import desk_datasets
from ookd.model import VISModel
from ookd.qfa import cost_matrix, match
from ookd.tracker import TrackerConfig, TrackResult, detect, track_video
from ookd.train import frame_targets, load_student


def oracle_tracks(model, clip, cfg: TrackerConfig, min_iou: float = 0.3) -> list[TrackResult]:
    T, H, W = clip.frames.shape[:3]
    acc = {tr.instance_id: (np.zeros((T, H, W), bool), [], []) for tr in clip.instances}
    with torch.no_grad():
        out = model(VISModel.preprocess(clip.frames))
    for t in range(T):
        dets = detect(out["class_logits"][t], out["boxes"][t].numpy(), out["mask_logits"][t], out["embeddings"][t],
                      cfg.conf_threshold, (H, W), cfg.max_overlap, cfg.min_area)
        for d in dets:
            best, iid = max((np.logical_and(d.mask, tr.masks[t]).sum() / max(np.logical_or(d.mask, tr.masks[t]).sum(), 1),
                             tr.instance_id) for tr in clip.instances)
            if best > min_iou:
                acc[iid][0][t] |= d.mask
                acc[iid][1].append(d.class_id)
                acc[iid][2].append(d.score)
    return [TrackResult(i, int(np.bincount(cl).argmax()), float(np.mean(sc)), m) for i, (m, cl, sc) in acc.items() if cl]


def slot_stability(model, clips, max_gap: int = 8) -> dict[int, float]:
    """Fraction of (instance, frame pair) cases where the GT-matched query index is unchanged, by frame gap."""
    hits = np.zeros(max_gap + 1)
    total = np.zeros(max_gap + 1)
    for clip in clips:
        with torch.no_grad():
            out = model(VISModel.preprocess(clip.frames))
        slots = {}
        for t in range(clip.num_frames):
            tg = frame_targets(clip, t)
            if len(tg["ids"]):
                S = cost_matrix(out["class_logits"][t], out["boxes"][t], tg["classes"], tg["boxes"])
                for iid, q in zip(tg["ids"], match(S).sigma):
                    slots.setdefault(iid, []).append((t, int(q)))
        for seq in slots.values():
            for i, (t, q) in enumerate(seq):
                for t2, q2 in seq[i + 1:]:
                    g = min(t2 - t, max_gap)
                    hits[g] += q == q2
                    total[g] += 1
    return {g: hits[g] / total[g] for g in range(1, max_gap + 1) if total[g]}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("ckpt")
    p.add_argument("--clips", type=int, default=30)
    args = p.parse_args()
    model, _ = load_student(args.ckpt)
    model.eval()
    data = desk_datasets(seed=0)
    cfg = TrackerConfig(retire_after=100)
    for name, clips in (("short", data.val_short[:args.clips]), ("long", data.val_long[:args.clips])):
        tracked = video_map({c.clip_id: track_video(c.frames, model, cfg) for c in clips}, clips)
        oracle = video_map({c.clip_id: oracle_tracks(model, c, cfg) for c in clips}, clips)
        print(f"{name:5s} tracker mAP {100 * tracked.mAP:6.2f}  oracle-association mAP {100 * oracle.mAP:6.2f}")
    stab = slot_stability(model, data.train[:args.clips])
    print("same query slot by frame gap: " + "  ".join(f"{g}:{v:.2f}" for g, v in stab.items()))


if __name__ == "__main__":
    main()
