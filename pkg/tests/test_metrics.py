import numpy as np
import pytest
from hypothesis import given, strategies as st

from multiscope.geometry import Detection, Track, point_in_polygon
from multiscope.metrics import (MissingLabelsError, SpatialPattern, count_accuracy, count_by_pattern,
                                identity_consistency, limit_query, load_labels, load_patterns, match_pattern,
                                save_labels, save_patterns)
from multiscope.refinement import TrackRefiner
from multiscope.sim import default_scene_spec, generate

from conftest import straight_track

LEFT = ((0, 0), (40, 0), (40, 200), (0, 200))
RIGHT = ((600, 0), (640, 0), (640, 200), (600, 200))
EAST = SpatialPattern("east", LEFT, RIGHT)


def test_match_pattern_examples():
    t = straight_track(0, 20, 100, 5, 0, 121)  # 20 -> 620
    assert match_pattern(t, EAST)
    back = straight_track(1, 620, 100, -5, 0, 121)
    assert not match_pattern(back, EAST)
    edge = straight_track(2, 40, 100, 5, 0, 113)  # starts exactly on the region's edge
    assert match_pattern(edge, EAST)


def test_count_accuracy_examples():
    tracks = [straight_track(i, 20, 100, 5, 0, 121) for i in range(7)]
    assert count_accuracy({"c": tracks}, {"c": {"east": 7}}, [EAST]) == 1.0
    assert count_accuracy({"c": tracks}, {"c": {"east": 10}}, [EAST]) == pytest.approx(0.7)
    assert count_accuracy({"c": tracks[:2]}, {"c": {"east": 0}}, [EAST]) == 0.0


def test_count_accuracy_averages_patterns_then_clips():
    west = SpatialPattern("west", RIGHT, LEFT)
    tracks = [straight_track(0, 20, 100, 5, 0, 121)]
    labels = {"a": {"east": 1, "west": 2}, "b": {"east": 1, "west": 0}}
    # clip a: (1 + 0) / 2, clip b: (1 + 1) / 2
    assert count_accuracy({"a": tracks, "b": tracks}, labels, [EAST, west]) == pytest.approx(0.75)


def test_count_accuracy_missing_labels():
    with pytest.raises(MissingLabelsError):
        count_accuracy({"c": []}, {}, [EAST])
    with pytest.raises(MissingLabelsError):
        count_accuracy({"c": []}, {"c": {"nope": 1}}, [EAST])


@given(st.dictionaries(st.sampled_from(["a", "b", "c"]), st.tuples(st.integers(0, 12), st.integers(0, 12)),
                       min_size=1))
def test_count_accuracy_bounded_and_exact_iff_one(cases):
    tracks = {cid: [straight_track(i, 20, 100, 5, 0, 121) for i in range(pred)] for cid, (pred, _) in cases.items()}
    labels = {cid: {"east": truth} for cid, (_, truth) in cases.items()}
    acc = count_accuracy(tracks, labels, [EAST])
    assert 0.0 <= acc <= 1.0
    assert (acc == 1.0) == all(p == t for p, t in cases.values())


BOTTOM = [(0, 176), (640, 176), (640, 352), (0, 352)]


def random_tracks(seed, n=30, duration=400):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        start = int(r.integers(0, duration - 20))
        length = int(r.integers(1, min(150, duration - start)))
        out.append(straight_track(i, float(r.uniform(0, 640)), float(r.uniform(150, 352)),
                                  float(r.uniform(-3, 3)), 0.0, length, start=start))
    return out


def scan_oracle(tracks, region, min_count, spacing, limit):
    last = max(d.frame for t in tracks for d in t.detections)
    cands = []
    for f in range(last + 1):
        durs = [t.duration for t in tracks if len(t) > 1
                for d in t.detections if d.frame == f and point_in_polygon(d.x, d.y, region)]
        if len(durs) >= min_count:
            cands.append((min(durs), f))
    cands.sort(key=lambda c: (-c[0], c[1]))
    chosen = []
    for _, f in cands:
        if len(chosen) < limit and all(abs(f - c) >= spacing for c in chosen):
            chosen.append(f)
    return sorted(chosen)


def test_limit_query_empty():
    assert limit_query([straight_track(0, 10, 10, 1, 0, 5)], BOTTOM) == []


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 80), st.integers(1, 25))
def test_limit_query_matches_scan_and_invariants(seed, min_count, spacing, limit):
    tracks = random_tracks(seed)
    got = limit_query(tracks, BOTTOM, min_count, spacing, limit)
    assert got == scan_oracle(tracks, BOTTOM, min_count, spacing, limit)
    assert got == sorted(got) and len(got) <= limit
    assert all(b - a >= spacing for a, b in zip(got, got[1:]))


def test_identity_consistency():
    gt = [straight_track(0, 20, 50, 4, 0, 40), straight_track(1, 20, 250, 4, 0, 40)]
    assert identity_consistency(gt, gt) == 1.0
    a = gt[0]
    split = [Track(5, "car", a.detections[:20]), Track(6, "car", a.detections[20:]), gt[1]]
    assert identity_consistency(split, gt) == 0.5
    assert identity_consistency([], gt) == 0.0
    assert identity_consistency([], []) == 1.0


def test_label_and_pattern_files(tmp_path):
    save_labels({"c1": {"east": 3}}, tmp_path / "l.json")
    assert load_labels(tmp_path / "l.json") == {"c1": {"east": 3}}
    save_patterns([EAST], tmp_path / "p.json")
    assert load_patterns(tmp_path / "p.json") == [EAST]


def test_refinement_does_not_lower_accuracy_on_truncated_tracks():
    spec = default_scene_spec(clip_count=12, duration=300)
    train, test = generate(spec, "train", 0), generate(spec, "test", 0)
    ref = TrackRefiner(frame_size=(640, 352), clip_length=300).fit([t for c in train.clips for t in c.tracks])
    truncated = {}
    for c in test.clips:
        out = []
        for t in c.tracks:
            n = len(t)
            out.append(Track(t.id, t.category, t.detections[n // 4: n // 4 + max(2, n // 2)]))
        truncated[c.id] = out
    before = count_accuracy(truncated, test.labels, test.patterns)
    after = count_accuracy({k: ref.transform(v) for k, v in truncated.items()}, test.labels, test.patterns)
    assert after >= before
    assert count_by_pattern([], test.patterns) == {p.id: 0 for p in test.patterns}
