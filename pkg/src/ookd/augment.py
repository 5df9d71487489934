"""Minor-Paste: class-imbalance-aware copy-paste of instance tracks between clips."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .masks import shift_mask
from .synthetic_video import InstanceTrack, VideoClip

log = logging.getLogger(__name__)

MIN_PASTE_AREA = 16


def paste_probabilities(p: Mapping[int, float] | Sequence[float], k: float = 0.7):
    """Paste probability per class, falling linearly from ``k`` (rarest) to 0 (most frequent).

    Returns the same container kind that was passed in (dict or list).
    A perfectly balanced distribution gets 0 everywhere.
    """
    if not 0.0 <= k <= 1.0:
        raise ValidationError(f"k={k} outside [0, 1]", "k")
    keys = list(p.keys()) if isinstance(p, Mapping) else None
    values = np.asarray(list(p.values()) if keys is not None else list(p), dtype=np.float64)
    if values.size == 0:
        raise ValidationError("no class frequencies given", "p")
    if np.any(values < 0) or np.any(values > 1):
        raise ValidationError("frequencies must lie in [0, 1]", "p")
    hi, lo = values.max(), values.min()
    if hi == lo:
        ps = np.zeros_like(values)
    else:
        ps = k * (hi - values) / (hi - lo)
    if keys is not None:
        return {c: float(v) for c, v in zip(keys, ps)}
    return [float(v) for v in ps]


@dataclass
class ClassStats:
    p: dict[int, float]
    p_s: dict[int, float]
    k: float = 0.7
    minor_threshold: float = 0.10
    counts: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_frequencies(cls, p: Mapping[int, float], k: float = 0.7, minor_threshold: float = 0.10,
                         counts: Mapping[int, int] | None = None) -> "ClassStats":
        return cls(dict(p), paste_probabilities(dict(p), k), k, minor_threshold, dict(counts or {}))

    def is_minor(self, class_id: int) -> bool:
        return self.p.get(class_id, 0.0) < self.minor_threshold

    @property
    def minor_classes(self) -> list[int]:
        return [c for c in self.p if self.is_minor(c)]

    def table(self, class_names: Sequence[str] | None = None) -> str:
        rows = ["class          count     p_c      p^s_c  minor", "-" * 48]
        for c in sorted(self.p):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            rows.append(f"{name:<14} {self.counts.get(c, 0):>5}  {self.p[c]:8.4f}  {self.p_s[c]:8.4f}  {'*' if self.is_minor(c) else ''}")
        return "\n".join(rows)


def select_minor_sources(dataset: Sequence[VideoClip], stats: ClassStats) -> list[tuple[VideoClip, InstanceTrack]]:
    """All (clip, track) pairs whose class frequency is below the minor threshold."""
    return [(clip, tr) for clip in dataset for tr in clip.instances if stats.is_minor(tr.class_id)]


def minor_paste(target: VideoClip, source_track: InstanceTrack, source_frames: np.ndarray, p_s: float,
                rng: np.random.Generator, offset: tuple[int, int] | None = None) -> VideoClip:
    """Paste ``source_track`` into ``target`` with probability ``p_s``.

    The source is translated by one (dy, dx) offset for the whole clip. Source
    frame t maps onto target frame t, clamped to the last source frame when the
    source is shorter. Returns ``target`` itself when no paste happens.
    """
    if rng.random() >= p_s:
        return target
    if not source_track.masks.any():
        warnings.warn(f"source instance {source_track.instance_id} is empty on every frame; skipping paste", stacklevel=2)
        return target

    T, H, W = target.frames.shape[:3]
    Ts = source_track.masks.shape[0]
    if offset is None:
        # keep the source box centre (averaged over visible frames) inside the target frame
        ys, xs = np.nonzero(source_track.masks.any(axis=0))
        cy, cx = ys.mean(), xs.mean()
        dy = int(rng.integers(0, H)) - int(round(cy))
        dx = int(rng.integers(0, W)) - int(round(cx))
    else:
        dy, dx = offset

    pasted = np.zeros((T, H, W), dtype=bool)
    src_idx = np.minimum(np.arange(T), Ts - 1)
    for t in range(T):
        pasted[t] = shift_mask(source_track.masks[src_idx[t]], dy, dx, (H, W))
    if pasted.reshape(T, -1).sum(axis=1).max() < MIN_PASTE_AREA:
        log.debug("paste aborted: visible area below %d px on every frame", MIN_PASTE_AREA)
        return target

    out = target.copy()
    for t in range(T):
        if not pasted[t].any():
            continue
        ys, xs = np.nonzero(pasted[t])
        out.frames[t, ys, xs] = source_frames[src_idx[t], ys - dy, xs - dx]
    for tr in out.instances:
        tr.masks &= ~pasted
        tr.refresh_boxes()
    new_id = max((tr.instance_id for tr in out.instances), default=-1) + 1
    out.instances.append(InstanceTrack.from_masks(new_id, source_track.class_id, pasted))
    return out


@dataclass
class AugmentConfig:
    enabled: bool = False
    k: float = 0.7
    minor_threshold: float = 0.10
    # "minor" pastes minor-class instances with p^s_c; "uniform" pastes any instance with uniform_p
    mode: str = "minor"
    max_pastes: int = 1
    uniform_p: float = 0.5


class MinorPaste:
    """On-the-fly augmenter bound to a training set and its class statistics."""

    def __init__(self, dataset: Sequence[VideoClip], config: AugmentConfig, stats: ClassStats | None = None):
        from .synthetic_video import compute_class_stats

        if config.mode not in ("minor", "uniform"):
            raise ValidationError(f"unknown mode {config.mode!r}", "augment.mode")
        self.config = config
        self.stats = stats or compute_class_stats(list(dataset), k=config.k, minor_threshold=config.minor_threshold)
        if config.mode == "minor":
            self.sources = select_minor_sources(dataset, self.stats)
        else:
            self.sources = [(clip, tr) for clip in dataset for tr in clip.instances]

    def probability(self, class_id: int) -> float:
        if self.config.mode == "uniform":
            return self.config.uniform_p
        return self.stats.p_s.get(class_id, 0.0)

    def __call__(self, clip: VideoClip, rng: np.random.Generator) -> VideoClip:
        if not self.config.enabled or not self.sources:
            return clip
        out = clip
        for _ in range(self.config.max_pastes):
            src_clip, src_track = self.sources[int(rng.integers(len(self.sources)))]
            if src_clip.clip_id == clip.clip_id:
                continue
            out = minor_paste(out, src_track, src_clip.frames, self.probability(src_track.class_id), rng)
        return out
