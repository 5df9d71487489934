"""Ablation runner: shared pretraining and teacher per seed, then one fine-tuning run per variant."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evalkit import similarity_histogram
from .synthetic_video import VideoClip, compute_class_stats
from .train import (Teacher, build_model, distill, evaluate, load_student, load_teacher, save_student, save_teacher,
                    train_baseline, train_teacher)

log = logging.getLogger(__name__)

# variant -> (distill?, pairing, Minor-Paste mode or None)
VARIANTS = {
    "baseline": (False, "qfa", None),
    "minor_paste": (False, "qfa", "minor"),
    "kd_no_qfa": (True, "index", None),
    "kd_qfa": (True, "qfa", None),
    "both": (True, "qfa", "minor"),
    "kd_qfa_uniform_paste": (True, "qfa", "uniform"),
}


def canonical_variant(name: str) -> str:
    key = name.lstrip("+")
    if key not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return key


@dataclass
class AblationConfig:
    pretrain_steps: int = 3000
    finetune_steps: int = 1500
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("baseline", "minor_paste", "kd_no_qfa", "kd_qfa", "both")
    similarity_videos: int = 60


def variant_config(base: RunConfig, variant: str, steps: int) -> RunConfig:
    kd, pairing, paste = VARIANTS[canonical_variant(variant)]
    cfg = copy.deepcopy(base)
    cfg.name = variant
    cfg.stage = "distill" if kd else "baseline"
    cfg.optim.steps = steps
    cfg.qfa.pairing = pairing
    cfg.augment.enabled = paste is not None
    if paste is not None:
        cfg.augment.mode = paste
    if not kd:
        cfg.loss.lambda4 = 0.0
    return cfg


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def data_fingerprint(clips: list[VideoClip]) -> str:
    """Digest of pixels and annotations, so cached runs are never reused across different data."""
    h = hashlib.sha256()
    for c in clips:
        h.update(c.clip_id.encode())
        h.update(np.ascontiguousarray(c.frames).tobytes())
        for tr in c.instances:
            h.update(np.array([tr.instance_id, tr.class_id]).tobytes())
            h.update(np.packbits(tr.masks).tobytes())
    return h.hexdigest()[:16]


def _training_dict(cfg: RunConfig, uses_teacher: bool) -> dict:
    """Config entries that influence a student's training; tracker settings only matter at evaluation."""
    d = cfg.to_dict()
    d.pop("tracker")
    if not uses_teacher:
        d.pop("teacher")
    return d


def _write_seconds(path: Path, seconds: float) -> None:
    path.with_suffix(".time").write_text(f"{seconds:.1f}\n")


def _read_seconds(path: Path) -> float:
    t = path.with_suffix(".time")
    return float(t.read_text()) if t.exists() else 0.0


def minor_class_ap(per_class: dict, minor: list[int]) -> float:
    vals = [per_class[c] for c in minor if c in per_class]
    return float(np.mean(vals)) if vals else float("nan")


def run_seed(base: RunConfig, abl: AblationConfig, seed: int, train: list[VideoClip], val_short: list[VideoClip],
             val_long: list[VideoClip], out_dir: Path) -> dict[str, dict]:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = copy.deepcopy(base)
    cfg.seed = seed
    stats = compute_class_stats(train, k=cfg.augment.k, minor_threshold=cfg.augment.minor_threshold)
    minor = stats.minor_classes

    pre_cfg = copy.deepcopy(cfg)
    pre_cfg.optim.steps = abl.pretrain_steps
    pre_cfg.augment.enabled = False
    key = _digest([_training_dict(pre_cfg, False), data_fingerprint(train)])
    pre_path = out_dir / f"pretrain_{key}.ckpt"
    if pre_path.exists():
        pretrained, _ = load_student(pre_path, pre_cfg)
    else:
        t0 = time.time()
        state = train_baseline(pre_cfg, train)
        save_student(pre_path, state, pre_cfg, "baseline")
        pretrained = state.model
        _write_seconds(pre_path, time.time() - t0)
        log.info("seed %d pretrain done in %.0fs", seed, time.time() - t0)

    teacher_key = _digest([key, dataclasses.asdict(cfg.teacher)])
    teacher_path = out_dir / f"teacher_{teacher_key}.ckpt"
    if teacher_path.exists():
        teacher = load_teacher(teacher_path, cfg.model)
    else:
        t0 = time.time()
        teacher, _ = train_teacher(cfg, train, copy.deepcopy(pretrained))
        save_teacher(teacher_path, teacher, cfg)
        _write_seconds(teacher_path, time.time() - t0)
        log.info("seed %d teacher done in %.0fs", seed, time.time() - t0)

    rows = {"_shared": {"seconds": _read_seconds(pre_path) + _read_seconds(teacher_path)}}
    val_key = [data_fingerprint(val_short), data_fingerprint(val_long)]
    for variant in abl.variants:
        vcfg = variant_config(cfg, variant, abl.finetune_steps)
        distilled = vcfg.stage == "distill"
        vkey = _digest([key, teacher_key if distilled else None, _training_dict(vcfg, distilled), dataclasses.asdict(vcfg.tracker),
                        abl.similarity_videos, val_key])
        mpath = out_dir / f"{canonical_variant(variant)}_{vkey}.json"
        if mpath.exists():
            with open(mpath) as fh:
                rows[variant] = json.load(fh)
            continue
        t0 = time.time()
        init = copy.deepcopy(pretrained)
        if vcfg.stage == "distill":
            state = distill(vcfg, train, init, teacher)
        else:
            state = train_baseline(vcfg, train, init=init)
        model = state.model
        short, _ = evaluate(model, val_short, vcfg.tracker)
        long, _ = evaluate(model, val_long, vcfg.tracker)
        sim = similarity_histogram(model, val_long, num_videos=abl.similarity_videos, seed=seed)
        sim_short = similarity_histogram(model, val_short, num_videos=abl.similarity_videos, seed=seed)
        row = {
            "variant": variant, "seed": seed,
            "mAP_S": 100 * short.mAP, "mAP_L": 100 * long.mAP,
            "AP50_S": 100 * short.AP50, "AP50_L": 100 * long.AP50,
            "minor_AP_S": 100 * minor_class_ap(short.per_class, minor),
            "minor_AP_L": 100 * minor_class_ap(long.per_class, minor),
            "similarity_L": sim.mean, "similarity_S": sim_short.mean,
            "similarity_hist_L": sim.counts.tolist(),
            "monotone": short.monotone and long.monotone,
            "short": short.to_dict(), "long": long.to_dict(),
            "final_loss": state.history[-1] if state.history else None,
            "seconds": time.time() - t0,
        }
        with open(mpath, "w") as fh:
            json.dump(row, fh, indent=1)
        rows[variant] = row
        log.info("seed %d %s: mAP_S %.2f mAP_L %.2f sim %.3f (%.0fs)", seed, variant, row["mAP_S"], row["mAP_L"],
                 row["similarity_L"], row["seconds"])
    return rows


SUMMARY_KEYS = ("mAP_S", "mAP_L", "AP50_S", "AP50_L", "minor_AP_S", "minor_AP_L", "similarity_S", "similarity_L")


def summarize(per_seed: dict[int, dict[str, dict]]) -> dict[str, dict]:
    variants = [v for v in next(iter(per_seed.values())) if not v.startswith("_")]
    out = {}
    for v in variants:
        out[v] = {k: float(np.mean([per_seed[s][v][k] for s in per_seed])) for k in SUMMARY_KEYS}
        out[v]["monotone"] = all(per_seed[s][v]["monotone"] for s in per_seed)
    return out


def render_markdown(summary: dict[str, dict]) -> str:
    head = "| variant | " + " | ".join(SUMMARY_KEYS) + " |"
    sep = "|" + "---|" * (len(SUMMARY_KEYS) + 1)
    lines = [head, sep]
    for v, row in summary.items():
        lines.append(f"| {v} | " + " | ".join(f"{row[k]:.3f}" if "similarity" in k else f"{row[k]:.2f}" for k in SUMMARY_KEYS) + " |")
    return "\n".join(lines)


def run_ablation(base: RunConfig, abl: AblationConfig, train: list[VideoClip], val_short: list[VideoClip],
                 val_long: list[VideoClip], out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base.save(out_dir / "config.json")
    with open(out_dir / "ablation.json", "w") as fh:
        json.dump(dataclasses.asdict(abl), fh, indent=1)
    per_seed = {s: run_seed(base, abl, s, train, val_short, val_long, out_dir / f"seed_{s}") for s in abl.seeds}
    summary = summarize(per_seed)
    result = {"summary": summary, "per_seed": {str(s): r for s, r in per_seed.items()}}
    with open(out_dir / "results.json", "w") as fh:
        json.dump(result, fh, indent=1)
    (out_dir / "results.md").write_text(render_markdown(summary) + "\n")
    return result
