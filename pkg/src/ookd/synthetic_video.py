"""Seeded synthetic videos of moving, occluding, deforming parametric shapes.

Classes are (shape, colour-family) pairs so appearance predicts class, while
several instances of one class can share a clip and differ only in size,
aspect, colour jitter and their temporal drift.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, ValidationError
from .masks import box_pixel_error, masks_to_boxes, rle_decode, rle_encode

SCHEMA_VERSION = 1

SHAPES = ("ellipse", "rectangle", "triangle", "ring", "star", "cross", "diamond")

COLOR_FAMILIES = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 220, 40),
    "cyan": (40, 210, 220),
    "magenta": (210, 50, 210),
    "orange": (240, 140, 30),
    "white": (235, 235, 235),
}


@dataclass(frozen=True)
class ShapeClass:
    shape: str
    color: str
    weight: float

    @property
    def name(self) -> str:
        return f"{self.color}_{self.shape}"


def default_palette() -> list[ShapeClass]:
    """Eight classes with a long-tailed frequency profile (two under 10%)."""
    spec = [
        ("ellipse", "red", 0.30),
        ("rectangle", "green", 0.20),
        ("triangle", "blue", 0.16),
        ("ring", "yellow", 0.12),
        ("star", "cyan", 0.10),
        ("diamond", "magenta", 0.06),
        ("cross", "orange", 0.04),
        ("ring", "white", 0.02),
    ]
    return [ShapeClass(s, c, w) for s, c, w in spec]


@dataclass
class ClipSpec:
    num_frames: int = 12
    height: int = 64
    width: int = 64
    class_palette: list[ShapeClass] = field(default_factory=default_palette)
    instances_per_clip: tuple[int, int] = (2, 4)
    max_translation: float = 2.0
    scale_jitter: float = 0.15
    allow_occlusion: bool = True
    allow_entry_exit: bool = False
    radius_range: tuple[float, float] = (6.0, 12.0)
    # peak colour change per frame (fraction of 255); the drift oscillates with a bounded
    # amplitude, so distant frames look less alike while each frame stays in distribution
    color_drift: float = 0.04
    color_amplitude: float = 35.0
    rotation_speed: float = 0.08

    def validate(self) -> None:
        if not isinstance(self.num_frames, (int, np.integer)) or self.num_frames < 2:
            raise ValidationError("must be an integer >= 2", "num_frames")
        if self.height < 32:
            raise ValidationError("must be >= 32", "height")
        if self.width < 32:
            raise ValidationError("must be >= 32", "width")
        if not self.class_palette:
            raise ValidationError("must contain at least one class", "class_palette")
        for c in self.class_palette:
            if c.shape not in SHAPES:
                raise ValidationError(f"unknown shape {c.shape!r}", "class_palette")
            if c.color not in COLOR_FAMILIES:
                raise ValidationError(f"unknown colour family {c.color!r}", "class_palette")
            if c.weight < 0:
                raise ValidationError("weights must be non-negative", "class_palette")
        total = sum(c.weight for c in self.class_palette)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"frequency weights sum to {total!r}, expected 1", "class_palette")
        lo, hi = self.instances_per_clip
        if lo < 1 or hi < lo:
            raise ValidationError(f"invalid range {self.instances_per_clip}", "instances_per_clip")
        if self.max_translation < 0:
            raise ValidationError("must be >= 0", "max_translation")
        for name in ("color_drift", "color_amplitude", "rotation_speed"):
            if getattr(self, name) < 0:
                raise ValidationError("must be >= 0", name)
        if not 0 <= self.scale_jitter < 1:
            raise ValidationError("must be in [0, 1)", "scale_jitter")
        r0, r1 = self.radius_range
        if r0 <= 0 or r1 < r0:
            raise ValidationError(f"invalid range {self.radius_range}", "radius_range")

    @property
    def num_classes(self) -> int:
        return len(self.class_palette)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.class_palette]


@dataclass
class InstanceTrack:
    instance_id: int
    class_id: int
    masks: np.ndarray  # (T, H, W) bool, visible region only
    boxes: np.ndarray  # (T, 4) normalized cx, cy, w, h; zeros when invisible
    visible: np.ndarray  # (T,) bool

    @classmethod
    def from_masks(cls, instance_id: int, class_id: int, masks: np.ndarray) -> "InstanceTrack":
        masks = np.asarray(masks, dtype=bool)
        boxes, visible = masks_to_boxes(masks)
        return cls(int(instance_id), int(class_id), masks, boxes, visible)

    def refresh_boxes(self) -> None:
        self.boxes, self.visible = masks_to_boxes(self.masks)

    def copy(self) -> "InstanceTrack":
        return InstanceTrack(self.instance_id, self.class_id, self.masks.copy(), self.boxes.copy(), self.visible.copy())


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    instances: list[InstanceTrack]
    clip_id: str

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.frames.shape[1]), int(self.frames.shape[2])

    def copy(self) -> "VideoClip":
        return VideoClip(self.frames.copy(), [tr.copy() for tr in self.instances], self.clip_id)

    def validate(self) -> None:
        """Raise ValidationError if any clip/track invariant is broken."""
        T, H, W = self.frames.shape[:3]
        if self.frames.dtype != np.uint8 or self.frames.shape[3:] != (3,):
            raise ValidationError("frames must be uint8 (T, H, W, 3)", "frames")
        ids = [tr.instance_id for tr in self.instances]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate instance ids {ids}", "instances")
        occupancy = np.zeros((T, H, W), dtype=np.int32)
        for tr in self.instances:
            if tr.masks.shape != (T, H, W):
                raise ValidationError(f"instance {tr.instance_id} has mask shape {tr.masks.shape}", "masks")
            boxes, visible = masks_to_boxes(tr.masks)
            if not np.array_equal(visible, tr.visible) or not np.allclose(boxes, tr.boxes, rtol=0, atol=1e-12):
                raise ValidationError(f"instance {tr.instance_id} boxes do not match masks", "boxes")
            occupancy += tr.masks
        if occupancy.max(initial=0) > 1:
            raise ValidationError("instance masks overlap", "masks")


def subsample_clip(clip: VideoClip, stride: int, clip_id: str | None = None) -> VideoClip:
    """Keep every ``stride``-th frame; used to build the long-interval split."""
    idx = np.arange(0, clip.num_frames, stride)
    tracks = [InstanceTrack(tr.instance_id, tr.class_id, tr.masks[idx], tr.boxes[idx], tr.visible[idx]) for tr in clip.instances]
    return VideoClip(clip.frames[idx].copy(), tracks, clip_id or clip.clip_id)


def _shape_mask(kind: str, yy, xx, cy, cx, radius, aspect, angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (c * dx + s * dy) / (radius * aspect)
    v = (-s * dx + c * dy) / radius
    if kind == "ellipse":
        return u * u + v * v <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if kind == "triangle":
        return (v <= 0.8) & (v >= -1.0) & (np.abs(u) <= 0.55 * (v + 1.0))
    if kind == "ring":
        rho = u * u + v * v
        return (rho <= 1.0) & (rho >= 0.3)
    if kind == "star":
        rho = np.sqrt(u * u + v * v)
        phi = np.arctan2(v, u)
        return rho <= 0.55 + 0.45 * np.cos(5 * phi)
    if kind == "cross":
        return ((np.abs(u) <= 0.33) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.33) & (np.abs(u) <= 1.0))
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    raise ValueError(kind)


def _trajectory(rng, spec: ClipSpec, radius: float) -> np.ndarray:
    """(T, 2) centres (y, x); bounces off the borders unless entry/exit is allowed."""
    T, H, W = spec.num_frames, spec.height, spec.width
    lo = np.array([radius, radius])
    hi = np.array([H - radius, W - radius])
    pos = rng.uniform(lo, np.maximum(hi, lo + 1))
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.3, 1.0) * spec.max_translation
    vel = speed * np.array([np.sin(angle), np.cos(angle)])
    out = np.empty((T, 2))
    for t in range(T):
        out[t] = pos
        vel = vel + rng.normal(0, 0.15 * spec.max_translation + 1e-9, size=2)
        norm = np.linalg.norm(vel)
        if norm > spec.max_translation:
            vel *= spec.max_translation / norm
        pos = pos + vel
        if not spec.allow_entry_exit:
            for d in range(2):
                if pos[d] < lo[d] or pos[d] > hi[d]:
                    vel[d] = -vel[d]
                    pos[d] = np.clip(pos[d], lo[d], hi[d])
    return out


def generate_clip(spec: ClipSpec, seed: int, clip_id: str | None = None) -> VideoClip:
    spec.validate()
    rng = np.random.default_rng(seed)
    T, H, W = spec.num_frames, spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5

    weights = np.array([c.weight for c in spec.class_palette])
    lo, hi = spec.instances_per_clip
    n_inst = int(rng.integers(lo, hi + 1))
    classes = rng.choice(len(weights), size=n_inst, p=weights / weights.sum())

    bg = rng.uniform(15, 60) + rng.normal(0, 4, size=(H, W, 3))
    frames = np.repeat(bg[None], T, axis=0)

    raw = np.zeros((n_inst, T, H, W), dtype=bool)
    colors = np.zeros((n_inst, T, 3))
    for attempt in range(20):
        for i, cls in enumerate(classes):
            sc = spec.class_palette[cls]
            radius = rng.uniform(*spec.radius_range)
            aspect = rng.uniform(0.75, 1.3)
            angle0 = rng.uniform(0, 2 * np.pi)
            spin = rng.uniform(-1, 1) * spec.rotation_speed
            scale_phase, scale_freq = rng.uniform(0, 2 * np.pi), rng.uniform(0.2, 0.6)
            base = np.clip(np.array(COLOR_FAMILIES[sc.color]) + rng.uniform(-30, 30, size=3), 0, 255)
            drift_dir = rng.normal(size=3)
            drift_dir /= np.linalg.norm(drift_dir) + 1e-12
            drift_phase = rng.uniform(0, 2 * np.pi)
            # sin(w t + phase) has slope up to w, so w = rate / amplitude keeps the per-frame rate
            drift_freq = 255 * spec.color_drift * 0.5 / max(spec.color_amplitude, 1e-9)
            centres = _trajectory(rng, spec, radius)
            for t in range(T):
                scale = 1.0 + spec.scale_jitter * np.sin(scale_freq * t + scale_phase)
                raw[i, t] = _shape_mask(sc.shape, yy, xx, centres[t, 0], centres[t, 1], radius * scale, aspect, angle0 + spin * t)
                colors[i, t] = base + spec.color_amplitude * np.sin(drift_freq * t + drift_phase) * drift_dir
        if spec.allow_occlusion or n_inst == 1:
            break
        overlap = raw.sum(axis=0).max() > 1
        if not overlap:
            break

    # z-order: later instances are drawn on top
    order = rng.permutation(n_inst)
    visible = raw.copy()
    covered = np.zeros((T, H, W), dtype=bool)
    for i in order[::-1]:
        visible[i] &= ~covered
        covered |= raw[i]
    for i in order:
        m = raw[i]
        shade = np.clip(colors[i], 0, 255)[:, None, None, :]
        frames = np.where(m[..., None], shade + rng.normal(0, 3, size=(T, H, W, 3)), frames)
    frames = np.clip(np.rint(frames), 0, 255).astype(np.uint8)

    tracks = [InstanceTrack.from_masks(i, int(classes[i]), visible[i]) for i in range(n_inst)]
    return VideoClip(frames, tracks, clip_id if clip_id is not None else f"clip_{seed}")


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(spec: ClipSpec, num_clips: int, seed: int, frame_range: tuple[int, int] | None = None,
                     stride: int = 1, prefix: str = "clip") -> list[VideoClip]:
    """Generate ``num_clips`` clips; ``stride > 1`` renders stride*(T-1)+1 frames and subsamples."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(num_clips):
        T = spec.num_frames if frame_range is None else int(rng.integers(frame_range[0], frame_range[1] + 1))
        s = dataclasses.replace(spec, num_frames=stride * (T - 1) + 1)
        clip = generate_clip(s, clip_seed(seed, i), clip_id=f"{prefix}_{i:05d}")
        if stride > 1:
            clip = subsample_clip(clip, stride)
        clips.append(clip)
    return clips


def compute_class_stats(dataset: list[VideoClip], k: float = 0.7, minor_threshold: float = 0.10,
                        num_classes: int | None = None):
    """Per-class instance frequencies and the matching Minor-Paste probabilities.

    Counts tracks, not pixels or frames. Classes that never occur are left out
    unless ``num_classes`` is given.
    """
    from .augment import ClassStats

    if not dataset:
        raise ValidationError("dataset is empty", "dataset")
    counts: dict[int, int] = {}
    for clip in dataset:
        for tr in clip.instances:
            counts[tr.class_id] = counts.get(tr.class_id, 0) + 1
    total = sum(counts.values())
    if total == 0:
        raise ValidationError("dataset has no instances", "dataset")
    if num_classes is not None:
        for c in range(num_classes):
            counts.setdefault(c, 0)
    p = {c: counts[c] / total for c in sorted(counts)}
    return ClassStats.from_frequencies(p, k=k, minor_threshold=minor_threshold, counts=counts)


# ---------------------------------------------------------------- dataset I/O

def _clip_to_json(clip: VideoClip) -> dict:
    T, H, W = clip.frames.shape[:3]
    return {
        "schema_version": SCHEMA_VERSION,
        "clip_id": clip.clip_id,
        "num_frames": T,
        "height": H,
        "width": W,
        "instances": [
            {
                "instance_id": tr.instance_id,
                "class_id": tr.class_id,
                "boxes": tr.boxes.tolist(),
                "visible": tr.visible.tolist(),
                "masks": [rle_encode(m) for m in tr.masks],
            }
            for tr in clip.instances
        ],
    }


def save_dataset(dataset: list[VideoClip], root, class_names: list[str] | None = None) -> Path:
    root = Path(root)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for clip in dataset:
        cdir = root / "clips" / clip.clip_id
        cdir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(clip.frames):
            Image.fromarray(frame, mode="RGB").save(cdir / f"frame_{t:04d}.png")
        with open(root / "annotations" / f"{clip.clip_id}.json", "w") as fh:
            json.dump(_clip_to_json(clip), fh)
    meta = {"schema_version": SCHEMA_VERSION, "clip_ids": [c.clip_id for c in dataset]}
    if class_names is not None:
        meta["class_names"] = list(class_names)
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    return root


def load_meta(root) -> dict:
    path = Path(root) / "meta.json"
    if not path.exists():
        return {}
    with open(path) as fh:
        return json.load(fh)


def _load_clip(root: Path, clip_id: str) -> VideoClip:
    ann_path = root / "annotations" / f"{clip_id}.json"
    if not ann_path.exists():
        raise DatasetError(f"missing annotation file {ann_path}")
    try:
        with open(ann_path) as fh:
            ann = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{ann_path}: invalid JSON ({exc})") from exc
    for key in ("clip_id", "num_frames", "height", "width", "instances"):
        if key not in ann:
            raise DatasetError(f"{ann_path}: missing field {key!r}")
    T, H, W = ann["num_frames"], ann["height"], ann["width"]
    frames = np.empty((T, H, W, 3), dtype=np.uint8)
    for t in range(T):
        fpath = root / "clips" / clip_id / f"frame_{t:04d}.png"
        if not fpath.exists():
            raise DatasetError(f"clip {clip_id}: missing frame file {fpath}")
        img = np.asarray(Image.open(fpath).convert("RGB"))
        if img.shape != (H, W, 3):
            raise DatasetError(f"clip {clip_id}: frame {t} has shape {img.shape}, expected {(H, W, 3)} ({fpath})")
        frames[t] = img
    tracks = []
    bad = []
    for inst in ann["instances"]:
        iid = inst.get("instance_id")
        masks_json = inst.get("masks", [])
        masks = np.zeros((T, H, W), dtype=bool)
        for t in range(T):
            if t >= len(masks_json) or masks_json[t] is None:
                raise DatasetError(f"clip {clip_id}: instance {iid} missing mask for frame {t} ({ann_path})")
            try:
                masks[t] = rle_decode(masks_json[t])
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"clip {clip_id}: instance {iid} frame {t}: bad RLE ({exc}) ({ann_path})") from exc
        boxes = np.asarray(inst["boxes"], dtype=np.float64).reshape(T, 4)
        visible = np.asarray(inst["visible"], dtype=bool).reshape(T)
        for t in range(T):
            if box_pixel_error(boxes[t], masks[t]) > 1.0:
                bad.append((iid, t))
        tracks.append(InstanceTrack(int(iid), int(inst["class_id"]), masks, boxes, visible))
    if bad:
        warnings.warn(f"clip {clip_id}: boxes inconsistent with masks by >1 px for (instance, frame) {bad}", stacklevel=3)
    return VideoClip(frames, tracks, ann["clip_id"])


def load_dataset(root) -> list[VideoClip]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    meta = load_meta(root)
    if "clip_ids" in meta:
        clip_ids = meta["clip_ids"]
    else:
        ann_dir = root / "annotations"
        if not ann_dir.is_dir():
            raise DatasetError(f"missing annotations directory {ann_dir}")
        clip_ids = sorted(p.stem for p in ann_dir.glob("*.json"))
    return [_load_clip(root, cid) for cid in clip_ids]
