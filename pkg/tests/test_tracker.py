import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from multiscope.geometry import Detection
from multiscope.scorer import LogisticMatchScorer, loss_and_grad, train_scorer
from multiscope.sim import PathSpec, SceneSpec, generate
from multiscope.tracker import (FEATURE_NAMES, N_FEATURES, OnlineTracker, SortScorer, TrackPrefix,
                                example_features, extract_features, gap_sequence, greedy_match, hungarian,
                                sample_training_examples, step, subsample)

from conftest import straight_track
from oracles import brute_force_assignment

F = {name: i for i, name in enumerate(FEATURE_NAMES)}
FRAME = (640, 352)


def prefix_from(track, upto):
    return TrackPrefix(0, list(track.detections[:upto]))


def test_features_identical_detection():
    p = TrackPrefix(0, [Detection(0, 100, 100, 20, 20)])
    f = extract_features(p, Detection(1, 100, 100, 20, 20), 1)
    assert f[F["dx_rate"]] == 0 and f[F["dy_rate"]] == 0
    assert f[F["log_w_ratio"]] == 0 and f[F["log_h_ratio"]] == 0 and f[F["abs_log_area_ratio"]] == 0


def test_features_exact_extrapolation_has_zero_residual():
    t = straight_track(0, 100, 100, 3, -1, 6)
    p = prefix_from(t, 5)
    f = extract_features(p, t.detections[5], 1)
    assert f[F["res_x"]] == pytest.approx(0) and f[F["res_y"]] == pytest.approx(0)


def test_features_gap_residual_hand_values():
    p = TrackPrefix(0, [Detection(0, 100, 100, 20, 20), Detection(1, 102, 100, 20, 20)])
    on = extract_features(p, Detection(5, 110, 100, 20, 20), 4)
    assert on[F["res_x"]] == pytest.approx(0) and on[F["res_norm"]] == pytest.approx(0)
    off = extract_features(p, Detection(5, 112, 100, 20, 20), 4)
    assert off[F["res_x"]] == pytest.approx(2 / 640) and off[F["res_y"]] == pytest.approx(0)
    assert off[F["res_rel"]] == pytest.approx(2 / 20)
    assert off[F["t_elapsed"]] == 4


def test_hungarian_one_by_one():
    assert hungarian(np.array([[0.9]]), 0.5)[0] == [(0, 0)]
    pairs, rows, cols = hungarian(np.array([[0.3]]), 0.5)
    assert pairs == [] and rows == [0] and cols == [0]


@given(st.integers(0, 2**32 - 1))
def test_hungarian_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    m = r.random((int(r.integers(1, 7)), int(r.integers(1, 7))))
    floor = float(r.uniform(0, 0.8))
    pairs, _, _ = hungarian(m, floor)
    total, best = brute_force_assignment(m, floor)
    assert sum(m[p] for p in pairs) == pytest.approx(total)
    assert all(m[p] >= floor for p in pairs)


def test_greedy_match_takes_highest_first():
    pairs, rows, cols = greedy_match(np.array([[0.9, 0.8], [0.85, 0.1]]), 0.2)
    assert pairs == [(0, 0)] and rows == [1] and cols == [1]


def test_step_spawns_and_ages():
    dets = [Detection(0, x, 50, 10, 10) for x in (10, 100, 200)]
    active, closed, nid = step([], dets, 0, SortScorer())
    assert len(active) == 3 and not closed and nid == 3

    class Low:
        floor = 0.5

        def score_pairs(self, prefixes, detections, frame):
            return np.full((len(prefixes), len(detections)), 0.1)

    active, closed, nid = step(active, [Detection(1, x, 300, 10, 10) for x in (10, 100)], 1, Low(), 0.5,
                               next_id=nid)
    assert len(active) == 5 and sum(p.misses for p in active) == 3 and nid == 5


def test_step_closes_after_patience():
    active = [TrackPrefix(0, [Detection(0, 10, 10, 10, 10)])]
    for f in (1, 2, 3):
        active, closed, _ = step(active, [], f, SortScorer(), patience=2)
    assert not active and len(closed) == 1


def test_step_rejects_stale_frames():
    with pytest.raises(ValueError):
        step([TrackPrefix(0, [Detection(3, 10, 10, 10, 10)])], [], 3, SortScorer())


def test_subsample_rule():
    t = straight_track(0, 0, 0, 1, 0, 21)
    assert subsample(t.detections, 1) == list(t.detections)
    assert [d.frame for d in subsample(t.detections, 8)] == [0, 8, 16]
    gappy = [d for d in t.detections if d.frame not in (8, 9)]
    assert [d.frame for d in subsample(gappy, 8)] == [0, 10, 18]


def test_gap_sequence():
    assert gap_sequence(8) == (1, 2, 4, 8)
    with pytest.raises(ValueError):
        gap_sequence(6)


# --------------------------------------------------------------------------- scorer

def lane_dataset(clips=8, seed=0, duration=300):
    spec = SceneSpec(paths=(PathSpec(((0, 64), (640, 64)), speed=(4.0, 6.0)),
                            PathSpec(((640, 288), (0, 288)), speed=(4.0, 6.0))),
                     clip_count=clips, duration=duration, object_rate=0.4, min_headway=30)
    return generate(spec, "train", seed)


@pytest.fixture(scope="module")
def lanes():
    return lane_dataset()


@pytest.fixture(scope="module")
def scorer(lanes):
    groups = [c.tracks for c in lanes.clips]
    ex = sample_training_examples(groups, gap_sequence(8), 3000, np.random.default_rng(0))
    return train_scorer(ex, FRAME, seed=0)


def test_examples_balanced_and_labelled(lanes):
    groups = [c.tracks for c in lanes.clips]
    ex = sample_training_examples(groups, gap_sequence(8), 10_000, np.random.default_rng(1))
    frac = np.mean([e.label for e in ex])
    assert 0.45 <= frac <= 0.55
    for e in ex[:200]:
        assert e.t_elapsed == e.candidate.frame - e.prefix[-1].frame
        if e.label == 1:
            assert e.t_elapsed >= e.gap or e.t_elapsed > 0


def test_sampler_needs_two_tracks():
    with pytest.raises(ValueError):
        sample_training_examples([[straight_track(0, 0, 0, 1, 0, 5)]], (1,), 10, np.random.default_rng(0))


def test_separable_examples_fit_perfectly():
    r = np.random.default_rng(0)
    X = r.normal(size=(600, N_FEATURES))
    y = (X[:, 0] + 0.5 * X[:, 3] > 0).astype(int)
    keep = np.abs(X[:, 0] + 0.5 * X[:, 3]) > 0.2
    X, y = X[keep], y[keep]
    m = LogisticMatchScorer().fit(X[:400], y[:400])
    assert m.score(X[400:], y[400:]) >= 0.99


def test_zero_features_give_base_rate():
    X = np.zeros((200, N_FEATURES))
    y = np.r_[np.ones(60), np.zeros(140)].astype(int)
    m = LogisticMatchScorer().fit(X, y)
    assert np.allclose(m.coef_, 0)
    assert m.predict_proba(X[:1])[0, 1] == pytest.approx(0.3, abs=1e-3)


def test_loss_non_increasing(scorer, lanes):
    assert all(b <= a + 1e-12 for a, b in zip(scorer.loss_curve_, scorer.loss_curve_[1:]))
    assert scorer.holdout_accuracy_ > 0.9


def finite_difference_check(params, X, y, l2, h=1e-6):
    _, g = loss_and_grad(params, X, y, l2)
    num = np.array([(loss_and_grad(params + h * e, X, y, l2)[0] - loss_and_grad(params - h * e, X, y, l2)[0])
                    / (2 * h) for e in np.eye(len(params))])
    return g, num


def test_gradient_matches_finite_differences():
    r = np.random.default_rng(2)
    X = r.normal(size=(100, N_FEATURES))
    y = r.integers(0, 2, 100).astype(float)
    params = r.normal(scale=0.3, size=N_FEATURES + 1)
    g, num = finite_difference_check(params, X, y, 1e-3)
    assert np.max(np.abs(g - num)) <= 1e-5 * max(1.0, np.max(np.abs(num)))


def test_scorer_round_trip(tmp_path, scorer):
    scorer.save(tmp_path / "s.json")
    back = LogisticMatchScorer.load(tmp_path / "s.json")
    X, _ = example_features(
        sample_training_examples([[straight_track(0, 0, 50, 4, 0, 40), straight_track(1, 600, 250, -4, 0, 40)]],
                                 (1, 2), 50, np.random.default_rng(0)), FRAME)
    np.testing.assert_allclose(back.predict_proba(X), scorer.predict_proba(X))


def test_scorer_rejects_wrong_feature_count():
    with pytest.raises(ValueError):
        LogisticMatchScorer().fit(np.zeros((4, 3)), [0, 1, 0, 1])


def test_extrapolated_detection_is_matched(scorer):
    t = straight_track(0, 100, 100, 5, 0, 12, w=40, h=30)
    p = prefix_from(t, 8)
    active, closed, _ = step([p], [t.detections[8]], t.detections[8].frame, scorer, scorer.floor)
    assert len(active) == 1 and len(active[0].detections) == 9
    assert scorer.score_pairs([prefix_from(t, 8)], [t.detections[8]], 8)[0, 0] > scorer.floor


# --------------------------------------------------------------------------- tracking a clip

def track_frames(frames, gap, scorer):
    tr = OnlineTracker(scorer)
    for f in range(0, len(frames), gap):
        tr.update(f, frames[f])
    return tr.finish()


def test_empty_clip_gives_no_tracks(scorer):
    assert track_frames([[] for _ in range(30)], 1, scorer) == []


@pytest.mark.parametrize("gap", [1, 4])
def test_single_object_single_track(scorer, gap):
    t = straight_track(0, 30, 100, 5, 0, 100, w=40, h=30)
    frames = [[d] for d in t.detections]
    out = track_frames(frames, gap, scorer)
    assert len(out) == 1
    assert [d.frame for d in out[0].detections] == list(range(0, 100, gap))


@pytest.mark.parametrize("gap", [1, 2, 4])
def test_track_invariants_on_generated_clip(lanes, scorer, gap):
    clip = lanes.clips[0]
    out = track_frames(clip.frames, gap, scorer)
    seen = [(d.frame, d.x, d.y) for t in out for d in t.detections]
    expect = [(d.frame, d.x, d.y) for f in range(0, clip.duration, gap) for d in clip.frames[f]]
    assert sorted(seen) == sorted(expect)
    for t in out:
        frames = [d.frame for d in t.detections]
        assert all(b - a >= gap for a, b in zip(frames, frames[1:]))


def test_sort_and_learned_agree_when_noiseless(lanes, scorer):
    for clip in lanes.clips[:3]:
        a = track_frames(clip.frames, 1, scorer)
        b = track_frames(clip.frames, 1, SortScorer())
        assert [t.detections for t in a] == [t.detections for t in b]
        assert len(a) == len(clip.tracks)
