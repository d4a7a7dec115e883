"""Count accuracy over spatial patterns, and queries answered from extracted tracks."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Track, iou_matrix, point_in_polygon

Polygon = tuple[tuple[float, float], ...]


class MissingLabelsError(KeyError):
    pass


@dataclass(frozen=True)
class SpatialPattern:
    id: str
    start: Polygon
    end: Polygon

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(tuple(map(float, p)) for p in self.start))
        object.__setattr__(self, "end", tuple(tuple(map(float, p)) for p in self.end))
        if len(self.start) < 3 or len(self.end) < 3:
            raise ValueError(f"pattern {self.id}: regions need at least three vertices")

    def to_dict(self) -> dict:
        return {"id": self.id, "start": [list(p) for p in self.start], "end": [list(p) for p in self.end]}

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialPattern":
        return cls(d["id"], tuple(map(tuple, d["start"])), tuple(map(tuple, d["end"])))


def match_pattern(track: Track, pattern: SpatialPattern) -> bool:
    return (point_in_polygon(track.first.x, track.first.y, pattern.start)
            and point_in_polygon(track.last.x, track.last.y, pattern.end))


def count_by_pattern(tracks: Sequence[Track], patterns: Sequence[SpatialPattern]) -> dict[str, int]:
    return {p.id: sum(match_pattern(t, p) for t in tracks) for p in patterns}


def clip_accuracy(predicted: Mapping[str, int], truth: Mapping[str, int]) -> float:
    """Mean over patterns of ``max(0, 1 - |pred - truth| / max(truth, 1))``."""
    if not truth:
        return 1.0
    accs = [max(0.0, 1.0 - abs(predicted.get(p, 0) - n) / max(n, 1)) for p, n in truth.items()]
    return float(np.mean(accs))


def count_accuracy(tracks_by_clip: Mapping[str, Sequence[Track]],
                   labels: Mapping[str, Mapping[str, int]],
                   patterns: Sequence[SpatialPattern]) -> float:
    """Average per-clip accuracy; every clip with tracks must have labels."""
    missing = [c for c in tracks_by_clip if c not in labels]
    if missing:
        raise MissingLabelsError(f"no labels for clips {missing[:5]}")
    if not tracks_by_clip:
        return 1.0
    by_id = {p.id: p for p in patterns}
    accs = []
    for clip_id, tracks in tracks_by_clip.items():
        truth = labels[clip_id]
        pats = [by_id[p] for p in truth if p in by_id]
        if len(pats) != len(truth):
            raise MissingLabelsError(f"clip {clip_id}: labels reference unknown patterns")
        accs.append(clip_accuracy(count_by_pattern(tracks, pats), truth))
    return float(np.mean(accs))


def limit_query(tracks: Sequence[Track], region: Sequence[Sequence[float]], min_count: int = 4,
                spacing: int = 50, limit: int = 20) -> list[int]:
    """Frames with at least ``min_count`` in-region detections, best-supported first.

    Candidates are ranked by the minimum duration among the in-region tracks
    (longer tracks are less likely to be spurious), ties by frame index. Frames are
    taken greedily while keeping every pair at least ``spacing`` frames apart, and
    returned in ascending order. Single-detection tracks are ignored.
    """
    occupancy: dict[int, list[int]] = defaultdict(list)
    for t in tracks:
        if len(t) < 2:
            continue
        for d in t.detections:
            if point_in_polygon(d.x, d.y, region):
                occupancy[d.frame].append(t.duration)
    ranked = sorted((-min(durs), f) for f, durs in occupancy.items() if len(durs) >= min_count)
    chosen: list[int] = []
    for _, f in ranked:
        if len(chosen) >= limit:
            break
        if all(abs(f - c) >= spacing for c in chosen):
            chosen.append(f)
    return sorted(chosen)


def identity_consistency(predicted: Sequence[Track], truth: Sequence[Track], min_iou: float = 0.5) -> float:
    """Fraction of ground-truth tracks recovered as exactly one predicted track.

    Detections are matched to ground truth per frame by maximum-IoU assignment. A
    ground-truth track counts as recovered when exactly one predicted track holds
    its matched detections and that predicted track holds no other object's.
    """
    if not truth:
        return 1.0
    gt_at: dict[int, list[tuple[int, tuple]]] = defaultdict(list)
    for t in truth:
        for d in t.detections:
            gt_at[d.frame].append((t.id, (d.x, d.y, d.w, d.h)))
    pred_at: dict[int, list[tuple[int, tuple]]] = defaultdict(list)
    for t in predicted:
        for d in t.detections:
            pred_at[d.frame].append((t.id, (d.x, d.y, d.w, d.h)))
    owners: dict[int, set] = defaultdict(set)  # gt id -> predicted ids
    contents: dict[int, set] = defaultdict(set)  # predicted id -> gt ids
    for frame, preds in pred_at.items():
        gts = gt_at.get(frame)
        if not gts:
            continue
        m = iou_matrix([b for _, b in preds], [b for _, b in gts])
        rows, cols = linear_sum_assignment(m, maximize=True)
        for r, c in zip(rows, cols):
            if m[r, c] >= min_iou:
                owners[gts[c][0]].add(preds[r][0])
                contents[preds[r][0]].add(gts[c][0])
    ok = 0
    for t in truth:
        o = owners.get(t.id, set())
        if len(o) == 1 and contents[next(iter(o))] == {t.id}:
            ok += 1
    return ok / len(truth)


def save_labels(labels: Mapping[str, Mapping[str, int]], path) -> None:
    with open(path, "w") as f:
        json.dump({c: dict(v) for c, v in labels.items()}, f, indent=1, sort_keys=True)


def load_labels(path) -> dict[str, dict[str, int]]:
    with open(path) as f:
        return {c: {p: int(n) for p, n in v.items()} for c, v in json.load(f).items()}


def save_patterns(patterns: Sequence[SpatialPattern], path) -> None:
    with open(path, "w") as f:
        json.dump([p.to_dict() for p in patterns], f, indent=1)


def load_patterns(path) -> list[SpatialPattern]:
    with open(path) as f:
        return [SpatialPattern.from_dict(p) for p in json.load(f)]
