import itertools

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from ookd.synthetic_video import ClipSpec, generate_clip
from ookd.tracker import (Detection, MemoryBank, MemoryEntry, TrackerConfig, assign_ids, detect, load_results,
                          save_results, track_video)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _det(emb):
    return Detection(0, 0.9, np.array([0.5, 0.5, 0.1, 0.1]), np.zeros((4, 4), bool), _unit(emb))


def _raw_outputs(seed, N=6, K=5, C=8, size=8):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(N, K, generator=g) * 3, torch.rand(N, 4, generator=g), torch.randn(N, size, size, generator=g),
            F.normalize(torch.randn(N, C, generator=g), dim=-1))


# ---------------------------------------------------------------- detect

def test_threshold_one_gives_nothing():
    assert detect(*_raw_outputs(0), conf_threshold=1.0) == []


def test_threshold_zero_keeps_every_query():
    assert len(detect(*_raw_outputs(0), conf_threshold=0.0)) == 6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_raising_threshold_never_adds(seed, a, b):
    lo, hi = min(a, b), max(a, b)
    out = _raw_outputs(seed)
    assert len(detect(*out, conf_threshold=hi)) <= len(detect(*out, conf_threshold=lo))


def test_pixel_conflicts_go_to_higher_score():
    logits = torch.tensor([[4.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    masks = torch.full((2, 4, 4), -5.0)
    masks[0, :2] = 5.0
    masks[1, 1:3] = 5.0
    dets = detect(logits, torch.rand(2, 4), masks, F.normalize(torch.randn(2, 3), dim=-1), 0.0)
    assert dets[0].score > dets[1].score
    assert dets[0].mask[:2].all()
    assert not dets[1].mask[1].any() and dets[1].mask[2].all()
    assert not (dets[0].mask & dets[1].mask).any()


def test_detection_embeddings_unit_norm():
    for d in detect(*_raw_outputs(3), conf_threshold=0.0):
        assert abs(np.linalg.norm(d.embedding) - 1) < 1e-9


# ---------------------------------------------------------------- assign_ids

def test_empty_memory_spawns_sequential_ids():
    dets = [_det(v) for v in np.eye(3)]
    ids, mem = assign_ids(dets, MemoryBank())
    assert ids == [0, 1, 2] and mem.next_id == 3


def test_identical_embedding_inherits_id():
    mem = MemoryBank([MemoryEntry(7, _unit([1, 0, 0]), 0), MemoryEntry(9, _unit([0, 1, 0]), 0)], next_id=10)
    ids, _ = assign_ids([_det([0, 1, 0])], mem, 1)
    assert ids == [9]


def test_input_memory_not_mutated():
    mem = MemoryBank([MemoryEntry(0, _unit([1, 0]), 0)], next_id=1)
    assign_ids([_det([1, 1])], mem, 1)
    assert np.array_equal(mem.entries[0].embedding, _unit([1, 0])) and mem.entries[0].last_seen == 0


def _embeddings_for(sim):
    """Unit detection/memory vectors in R^4 realizing a 2x2 cosine matrix (memory entries orthonormal)."""
    E = np.eye(4)[:2]
    D = []
    for row in sim:
        rest = 1 - sum(s * s for s in row)
        D.append(np.concatenate([row, [np.sqrt(rest), 0]]) if len(D) == 0 else np.concatenate([row, [0, np.sqrt(rest)]]))
    return np.array(D), E


def test_two_by_two_matches_brute_force():
    sim = np.array([[0.9, 0.2], [0.1, 0.8]])
    D, E = _embeddings_for(sim)
    assert np.allclose(D @ E.T, sim)
    mem = MemoryBank([MemoryEntry(0, E[0], 0), MemoryEntry(1, E[1], 0)], next_id=2)
    ids, _ = assign_ids([_det(d) for d in D], mem, 1)
    best = max(itertools.permutations(range(2)), key=lambda p: sum(sim[i, p[i]] for i in range(2)))
    assert ids == list(best) == [0, 1]


def test_below_threshold_spawns():
    mem = MemoryBank([MemoryEntry(0, _unit([1, 0]), 0)], next_id=1)
    ids, mem2 = assign_ids([_det([0.2, 1])], mem, 1, spawn_threshold=0.3)
    assert ids == [1] and mem2.next_id == 2


def test_momentum_update_and_norm():
    e, f = _unit([1, 0]), _unit([1, 1])
    mem = MemoryBank([MemoryEntry(0, e, 0)], next_id=1)
    _, mem2 = assign_ids([_det(f)], mem, 1, momentum=0.75)
    assert np.allclose(mem2.entries[0].embedding, _unit(0.75 * e + 0.25 * f))
    assert abs(np.linalg.norm(mem2.entries[0].embedding) - 1) < 1e-12


def test_retired_entries_are_not_matched():
    mem = MemoryBank([MemoryEntry(0, _unit([1, 0]), 0)], next_id=1)
    ids, mem2 = assign_ids([_det([1, 0])], mem, 11, retire_after=10)
    assert ids == [1] and [e.instance_id for e in mem2.entries] == [1]
    ids, _ = assign_ids([_det([1, 0])], mem, 10, retire_after=10)
    assert ids == [0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ids_unique_and_never_reused(seed):
    rng = np.random.default_rng(seed)
    mem = MemoryBank()
    seen_max = -1
    for t in range(12):
        dets = [_det(rng.normal(size=4)) for _ in range(int(rng.integers(0, 4)))]
        ids, mem = assign_ids(dets, mem, t, retire_after=3)
        assert len(set(ids)) == len(ids)
        new = [i for i in ids if i > seen_max]
        assert new == list(range(seen_max + 1, seen_max + 1 + len(new)))
        seen_max = max([seen_max] + ids)
        for e in mem.entries:
            assert abs(np.linalg.norm(e.embedding) - 1) < 1e-9


# ---------------------------------------------------------------- track_video

@pytest.fixture
def detecting_model(small_model):
    # bias the class head so that random-weight outputs clear a moderate threshold
    with torch.no_grad():
        small_model.heads.class_head.bias[-1] = -4.0
    return small_model


def test_single_frame_video(detecting_model, small_spec):
    clip = generate_clip(small_spec, 0)
    tracks = track_video(clip.frames[:1], detecting_model, TrackerConfig(conf_threshold=0.0, max_overlap=1.0))
    assert tracks and all(tr.masks.shape == (1, 32, 32) for tr in tracks)


def test_tracking_is_deterministic(detecting_model, small_spec):
    clip = generate_clip(small_spec, 1)
    cfg = TrackerConfig(conf_threshold=0.2)
    a, b = track_video(clip.frames, detecting_model, cfg), track_video(clip.frames, detecting_model, cfg)
    assert [(t.instance_id, t.class_id, t.score) for t in a] == [(t.instance_id, t.class_id, t.score) for t in b]
    assert all(np.array_equal(x.masks, y.masks) for x, y in zip(a, b))


def test_reversed_static_clip_same_track_count(detecting_model):
    spec = ClipSpec(num_frames=6, height=32, width=32, max_translation=0.0, scale_jitter=0.0, color_drift=0.0,
                    rotation_speed=0.0, radius_range=(5.0, 8.0))
    clip = generate_clip(spec, 4)
    cfg = TrackerConfig(conf_threshold=0.2)
    fwd = track_video(clip.frames, detecting_model, cfg)
    rev = track_video(clip.frames[::-1].copy(), detecting_model, cfg)
    assert len(fwd) == len(rev)


def test_causality_over_random_clips(detecting_model, small_spec):
    cfg = TrackerConfig(conf_threshold=0.2)
    rng = np.random.default_rng(0)
    for seed in range(50):
        clip = generate_clip(small_spec, 1000 + seed)
        _, full = track_video(clip.frames, detecting_model, cfg, return_frames=True)
        t = int(rng.integers(0, clip.num_frames))
        _, part = track_video(clip.frames[:t + 1], detecting_model, cfg, return_frames=True)
        for a, b in zip(full[:t + 1], part):
            assert [i for i, _ in a] == [i for i, _ in b]
            assert all(np.array_equal(x.mask, y.mask) and x.score == y.score for (_, x), (_, y) in zip(a, b))


def test_results_json_round_trip(tmp_path, detecting_model, small_spec):
    clip = generate_clip(small_spec, 2)
    tracks = track_video(clip.frames, detecting_model, TrackerConfig(conf_threshold=0.2))
    save_results(tmp_path / "r.json", clip.clip_id, tracks)
    cid, loaded = load_results(tmp_path / "r.json")
    assert cid == clip.clip_id and len(loaded) == len(tracks)
    for a, b in zip(tracks, loaded):
        assert (a.instance_id, a.class_id, a.score) == (b.instance_id, b.class_id, b.score)
        assert np.array_equal(a.masks, b.masks)
