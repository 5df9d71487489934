import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ookd.augment import AugmentConfig, ClassStats, MinorPaste, minor_paste, paste_probabilities, select_minor_sources
from ookd.errors import ValidationError
from ookd.synthetic_video import ClipSpec, InstanceTrack, VideoClip, compute_class_stats, generate_clip, generate_dataset


def test_frequency_extremes_map_to_zero_and_k():
    # long-tailed frequencies: the most frequent class is never pasted, the rarest at k
    p = {"human": 0.355, "cat": 0.05, "squirrel": 0.003}
    ps = paste_probabilities(p, 0.7)
    assert ps["human"] == 0.0
    assert ps["squirrel"] == 0.7


def test_hand_evaluated_midpoints():
    ps = paste_probabilities([0.5, 0.3, 0.2], 0.7)
    assert ps[0] == 0.0
    assert abs(ps[1] - 0.7 * 0.2 / 0.3) < 1e-9
    assert abs(ps[1] - 0.4667) < 1e-4
    assert abs(ps[2] - 0.7) < 1e-9


def test_balanced_gives_zero():
    assert paste_probabilities([0.25] * 4, 0.7) == [0.0] * 4


@pytest.mark.parametrize("k", [-0.1, 1.5])
def test_k_out_of_range(k):
    with pytest.raises(ValidationError):
        paste_probabilities([0.5, 0.5], k)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=10), st.floats(0, 1))
def test_paste_probabilities_range(p, k):
    ps = paste_probabilities(p, k)
    assert all(0.0 <= v <= k + 1e-12 for v in ps)
    if max(p) != min(p):
        assert ps[int(np.argmax(p))] == 0.0
        assert abs(ps[int(np.argmin(p))] - k) < 1e-12


def _dataset_with_classes(small_spec, class_lists):
    out = []
    for i, classes in enumerate(class_lists):
        spec = dataclasses.replace(small_spec, instances_per_clip=(len(classes), len(classes)))
        clip = generate_clip(spec, 100 + i)
        for tr, c in zip(clip.instances, classes):
            tr.class_id = c
        out.append(clip)
    return out


def test_balanced_dataset_has_no_minor_sources(small_spec):
    ds = _dataset_with_classes(small_spec, [[0, 1], [1, 0]])
    assert select_minor_sources(ds, compute_class_stats(ds)) == []


def test_only_minor_class_selected(small_spec):
    # 19 instances of class 0, 1 of class 1 -> p_1 = 0.05
    ds = _dataset_with_classes(small_spec, [[0, 0, 0, 0]] * 4 + [[0, 0, 0, 1]])
    stats = compute_class_stats(ds)
    assert stats.p[1] == 0.05
    sel = select_minor_sources(ds, stats)
    assert len(sel) == 1 and sel[0][1].class_id == 1 and sel[0][0] is ds[-1]


def test_selection_matches_brute_force():
    ds = generate_dataset(ClipSpec(num_frames=3, height=32, width=32), 80, seed=2)
    stats = compute_class_stats(ds)
    sel = {(c.clip_id, tr.instance_id) for c, tr in select_minor_sources(ds, stats)}
    brute = set()
    for c in ds:
        for tr in c.instances:
            n = sum(t.class_id == tr.class_id for cc in ds for t in cc.instances)
            total = sum(len(cc.instances) for cc in ds)
            if n / total < 0.10:
                brute.add((c.clip_id, tr.instance_id))
    assert sel == brute and sel


def _square_clip(T, H, W, boxes, cls=0, clip_id="t"):
    """Clip with one instance per entry of ``boxes``: (y0, x0, size) squares on every frame."""
    frames = np.full((T, H, W, 3), 20, np.uint8)
    tracks = []
    for i, (y, x, s) in enumerate(boxes):
        m = np.zeros((T, H, W), bool)
        m[:, y:y + s, x:x + s] = True
        frames[m] = 100 + 40 * i
        tracks.append(InstanceTrack.from_masks(i, cls, m))
    return VideoClip(frames, tracks, clip_id)


def test_zero_probability_returns_target(small_dataset, rng):
    target, source = small_dataset[0], small_dataset[1]
    out = minor_paste(target, source.instances[0], source.frames, 0.0, rng)
    assert out is target


def test_paste_without_overlap():
    target = _square_clip(3, 32, 32, [(2, 2, 6)])
    source = _square_clip(3, 32, 32, [(20, 20, 6)], cls=5, clip_id="s")
    before = [tr.masks.copy() for tr in target.instances]
    out = minor_paste(target, source.instances[0], source.frames, 1.0, np.random.default_rng(0), offset=(0, 0))
    out.validate()
    assert len(out.instances) == 2
    assert np.array_equal(out.instances[0].masks, before[0])
    new = out.instances[1]
    assert new.class_id == 5 and new.instance_id == 1
    assert np.array_equal(new.masks, source.instances[0].masks)
    # union of masks grew by exactly the pasted area
    union_before = before[0].sum()
    union_after = (out.instances[0].masks | new.masks).sum()
    assert union_after == union_before + source.instances[0].masks.sum()
    assert np.array_equal(out.frames[:, 20:26, 20:26], source.frames[:, 20:26, 20:26])


def test_paste_covering_small_instance_empties_it():
    target = _square_clip(3, 32, 32, [(10, 10, 3), (0, 0, 4)])
    # source covers (8..16) only on frame 2
    src = np.zeros((3, 32, 32), bool)
    src[:, 25:29, 25:29] = True
    src[2, 25:29, 25:29] = False
    src[2, 8:16, 8:16] = True
    source = VideoClip(np.full((3, 32, 32, 3), 200, np.uint8), [InstanceTrack.from_masks(0, 3, src)], "s")
    out = minor_paste(target, source.instances[0], source.frames, 1.0, np.random.default_rng(0), offset=(0, 0))
    out.validate()
    small = out.instances[0]
    assert small.masks[:2].sum() == 2 * 9  # untouched on frames 0, 1
    assert not small.masks[2].any() and not small.visible[2] and not small.boxes[2].any()
    # mask-subtraction oracle: new target mask = old mask minus pasted region
    assert np.array_equal(small.masks, target.instances[0].masks & ~src)
    assert np.array_equal(out.instances[1].masks, target.instances[1].masks)


def test_empty_source_is_skipped_with_warning(rng):
    target = _square_clip(3, 32, 32, [(2, 2, 6)])
    empty = InstanceTrack.from_masks(0, 1, np.zeros((3, 32, 32), bool))
    with pytest.warns(UserWarning, match="empty"):
        out = minor_paste(target, empty, target.frames, 1.0, rng)
    assert out is target


def test_tiny_visible_paste_aborted():
    target = _square_clip(3, 32, 32, [(2, 2, 6)])
    source = _square_clip(3, 32, 32, [(0, 0, 5)], clip_id="s")
    # move the source almost entirely out of frame: 1x5 strip visible (5 px < 16)
    out = minor_paste(target, source.instances[0], source.frames, 1.0, np.random.default_rng(0), offset=(-4, 0))
    assert out is target


def test_short_source_clamped_to_last_frame():
    target = _square_clip(5, 32, 32, [(0, 0, 3)])
    src = np.zeros((2, 32, 32), bool)
    src[0, 10:15, 10:15] = True
    src[1, 12:18, 12:18] = True
    source = VideoClip(np.full((2, 32, 32, 3), 200, np.uint8), [InstanceTrack.from_masks(0, 2, src)], "s")
    out = minor_paste(target, source.instances[0], source.frames, 1.0, np.random.default_rng(0), offset=(0, 0))
    new = out.instances[-1].masks
    assert np.array_equal(new[0], src[0])
    for t in range(1, 5):
        assert np.array_equal(new[t], src[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_random_pastes_keep_invariants(seed):
    spec = ClipSpec(num_frames=4, height=32, width=32, radius_range=(4.0, 9.0))
    rng = np.random.default_rng(seed)
    target = generate_clip(spec, seed)
    source = generate_clip(spec, seed + 1)
    tr = source.instances[int(rng.integers(len(source.instances)))]
    out = minor_paste(target, tr, source.frames, 1.0, rng)
    out.validate()
    assert len(out.instances) in (len(target.instances), len(target.instances) + 1)


def test_empirical_paste_rate():
    target = _square_clip(2, 32, 32, [(0, 0, 4)])
    source = _square_clip(2, 32, 32, [(10, 10, 8)], clip_id="s")
    for p in (0.2, 0.7):
        rng = np.random.default_rng(1)
        pasted = sum(
            minor_paste(target, source.instances[0], source.frames, p, rng, offset=(0, 0)) is not target
            for _ in range(10_000)
        )
        assert abs(pasted / 10_000 - p) <= 0.02


def test_minor_paste_augmenter_only_pastes_minor_classes():
    ds = generate_dataset(ClipSpec(num_frames=3, height=32, width=32), 60, seed=4)
    aug = MinorPaste(ds, AugmentConfig(enabled=True, max_pastes=3))
    minor = set(aug.stats.minor_classes)
    rng = np.random.default_rng(0)
    added = []
    for clip in ds[:40]:
        out = aug(clip, rng)
        out.validate()
        added += [tr.class_id for tr in out.instances[len(clip.instances):]]
    assert added and set(added) <= minor


def test_uniform_mode_uses_all_instances():
    ds = generate_dataset(ClipSpec(num_frames=3, height=32, width=32), 20, seed=4)
    aug = MinorPaste(ds, AugmentConfig(enabled=True, mode="uniform"))
    assert len(aug.sources) == sum(len(c.instances) for c in ds)
    assert aug.probability(0) == 0.5


def test_class_stats_table_lists_every_class():
    stats = ClassStats.from_frequencies({0: 0.6, 1: 0.35, 2: 0.05})
    table = stats.table(["a", "b", "c"])
    assert "c" in table and "0.7000" in table
