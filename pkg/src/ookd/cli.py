"""``ookd`` command line: data generation, training stages, tracking, evaluation, ablations, plots.

Exit codes: 0 success, 2 validation error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import RunConfig, apply_overrides, load_config
from .errors import DivergenceError, ValidationError

log = logging.getLogger("ookd")


def runs_root() -> Path:
    return Path(os.environ.get("OOKD_RUNS_DIR", "runs"))


def make_run_dir(name: str, explicit: str | None = None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        path = runs_root() / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def get_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = apply_overrides(cfg, getattr(args, "set", None) or [])
    cfg.validate()
    return cfg


def _load(root):
    from .synthetic_video import load_dataset

    if root is None:
        raise ValidationError("dataset path not set (use --data or data.* config keys)", "data")
    return load_dataset(root)


def cmd_gen_data(args) -> int:
    from .synthetic_video import ClipSpec, generate_dataset, save_dataset

    spec = ClipSpec(height=args.size, width=args.size)
    clips = generate_dataset(spec, args.num_clips, args.seed, frame_range=(args.min_frames, args.max_frames),
                             stride=args.stride, prefix=args.prefix)
    save_dataset(clips, args.out, class_names=spec.class_names)
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def cmd_stats(args) -> int:
    from .synthetic_video import compute_class_stats, load_meta

    clips = _load(args.data)
    stats = compute_class_stats(clips, k=args.k, minor_threshold=args.minor_threshold)
    print(stats.table(load_meta(args.data).get("class_names")))
    return 0


def _finish_student(state, cfg, run_dir: Path, stage: str) -> None:
    from .train import save_student

    save_student(run_dir / "model.ckpt", state, cfg, stage)
    print(f"checkpoint: {run_dir / 'model.ckpt'}")


def cmd_train_baseline(args) -> int:
    from .train import load_student, make_state, run_training, build_model

    cfg = get_config(args)
    cfg.stage = "baseline"
    run_dir = make_run_dir("baseline", args.out_dir)
    cfg.save(run_dir / "config.json")
    train = _load(args.data or cfg.data.train_root)
    if args.resume:
        model, extra = load_student(args.resume, cfg)
        state = make_state(model, cfg)
        state.optimizer.load_state_dict(extra["optimizer"])
        state.scheduler.load_state_dict(extra["scheduler"])
        state.step = extra["step"]
    else:
        model = load_student(args.init, cfg)[0] if args.init else build_model(cfg.model, cfg.seed)
        state = make_state(model, cfg)
    state = run_training(cfg, train, state, "baseline", None, run_dir, stop_at=args.stop_at)
    _finish_student(state, cfg, run_dir, "baseline")
    return 0


def cmd_train_teacher(args) -> int:
    from .train import load_student, save_teacher, train_teacher

    cfg = get_config(args)
    cfg.stage = "teacher"
    run_dir = make_run_dir("teacher", args.out_dir)
    cfg.save(run_dir / "config.json")
    train = _load(args.data or cfg.data.train_root)
    frame_model, _ = load_student(args.baseline, cfg)
    teacher, _ = train_teacher(cfg, train, frame_model, run_dir)
    out = Path(args.out) if args.out else run_dir / "teacher.ckpt"
    save_teacher(out, teacher, cfg)
    print(f"teacher checkpoint: {out}")
    return 0


def cmd_distill(args) -> int:
    from .train import distill, load_student, load_teacher

    cfg = get_config(args)
    cfg.stage = "distill"
    run_dir = make_run_dir("distill", args.out_dir)
    cfg.save(run_dir / "config.json")
    train = _load(args.data or cfg.data.train_root)
    student, _ = load_student(args.student, cfg)
    teacher = load_teacher(args.teacher, cfg.model)
    if args.cache:
        teacher.load_cache(args.cache)
    state = distill(cfg, train, student, teacher, run_dir)
    if args.cache:
        teacher.save_cache(args.cache)
    _finish_student(state, cfg, run_dir, "distill")
    return 0


def cmd_track(args) -> int:
    from .tracker import save_results, track_video
    from .train import load_student

    cfg = get_config(args)
    model, _ = load_student(args.ckpt)
    clips = _load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        save_results(out / f"{clip.clip_id}.json", clip.clip_id, track_video(clip.frames, model, cfg.tracker))
    print(f"wrote {len(clips)} result files to {out}")
    return 0


def cmd_eval(args) -> int:
    from .evalkit import video_map
    from .tracker import load_results

    gt = _load(args.gt)
    preds = {}
    for path in sorted(Path(args.pred).glob("*.json")):
        cid, tracks = load_results(path)
        preds[cid] = tracks
    result = video_map(preds, gt)
    doc = result.to_dict()
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=1)
    print(json.dumps({k: doc[k] for k in ("mAP", "AP50", "AP75", "AR1", "AR10")}, indent=1))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import AblationConfig, render_markdown, run_ablation

    cfg = get_config(args)
    abl = AblationConfig()
    if args.variants:
        abl.variants = tuple(v.strip() for v in args.variants.split(","))
    if args.seeds:
        abl.seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.pretrain_steps is not None:
        abl.pretrain_steps = args.pretrain_steps
    if args.finetune_steps is not None:
        abl.finetune_steps = args.finetune_steps
    run_dir = make_run_dir("ablate", args.out_dir)
    train = _load(cfg.data.train_root)
    result = run_ablation(cfg, abl, train, _load(cfg.data.val_short_root), _load(cfg.data.val_long_root), run_dir)
    print(render_markdown(result["summary"]))
    return 0


def cmd_plot_similarity(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evalkit import similarity_histogram
    from .train import load_student

    clips = _load(args.data)
    fig, ax = plt.subplots(figsize=(6, 4))
    doc = {}
    for path in args.ckpt:
        model, _ = load_student(path)
        hist = similarity_histogram(model, clips, num_videos=args.num_videos, bins=args.bins, seed=args.seed)
        centers = 0.5 * (hist.edges[1:] + hist.edges[:-1])
        ax.bar(centers, hist.counts / max(hist.counts.sum(), 1), width=hist.edges[1] - hist.edges[0], alpha=0.5,
               label=f"{Path(path).parent.name or path} (mean {hist.mean:.3f})")
        doc[str(path)] = hist.to_dict()
    ax.set_xlabel("cosine similarity (same instance, two frames)")
    ax.set_ylabel("fraction of pairs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    with open(Path(args.out).with_suffix(".json"), "w") as fh:
        json.dump(doc, fh, indent=1)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ookd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out-dir", help="run directory (default: $OOKD_RUNS_DIR/<stage>-<time>)")
        return sp

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-clips", type=int, default=300)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--min-frames", type=int, default=12)
    sp.add_argument("--max-frames", type=int, default=16)
    sp.add_argument("--stride", type=int, default=1, help="temporal subsampling (4 for the long split)")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--prefix", default="clip")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("stats", help="print class frequencies and paste probabilities")
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", type=float, default=0.7)
    sp.add_argument("--minor-threshold", type=float, default=0.10)
    sp.set_defaults(func=cmd_stats)

    sp = with_config(sub.add_parser("train-baseline", help="train the per-frame model"))
    sp.add_argument("--data")
    sp.add_argument("--init", help="start from this student checkpoint")
    sp.add_argument("--resume", help="resume optimizer, schedule and step from this checkpoint")
    sp.add_argument("--stop-at", type=int, help="stop after this many steps (checkpoint can be resumed)")
    sp.set_defaults(func=cmd_train_baseline)

    sp = with_config(sub.add_parser("train-teacher", help="train the offline aggregator on a frozen baseline"))
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--out")
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_train_teacher)

    sp = with_config(sub.add_parser("distill", help="distill offline knowledge into a student"))
    sp.add_argument("--student", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--data")
    sp.add_argument("--cache", help="knowledge cache file (reused when it matches the teacher)")
    sp.set_defaults(func=cmd_distill)

    sp = with_config(sub.add_parser("track", help="run online tracking and write result files"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="video AP/AR of result files against a dataset")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="run named ablation variants"))
    sp.add_argument("--variants", help="comma-separated, e.g. baseline,kd_qfa")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--pretrain-steps", type=int)
    sp.add_argument("--finetune-steps", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot-similarity", help="overlay same-instance similarity histograms")
    sp.add_argument("--ckpt", action="append", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-videos", type=int, default=100)
    sp.add_argument("--bins", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_plot_similarity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
