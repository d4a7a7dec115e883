"""Online multi-object tracking at a reduced, fixed sampling gap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Detection, Track, iou_matrix

FEATURE_NAMES = (
    "dx_rate", "dy_rate",              # position delta per elapsed frame, frame-normalised
    "res_x", "res_y",                  # signed residual vs. last-two-detection extrapolation
    "res_norm",                        # residual length / frame diagonal
    "res_rel",                         # residual length / object size
    "agg_res_rel",                     # residual vs. last-five-detection velocity / object size
    "log_w_ratio", "log_h_ratio",
    "abs_log_area_ratio",
    "t_elapsed",
    "log_prefix_len",
    "log_res_rel",                     # log-scale residuals let a linear model grow
    "log_agg_res_rel",                 # its acceptance radius with the gap
    "log_t_elapsed",
    "single",                          # prefix has one detection, so no velocity yet
    "single_log_t",
    "edge",                            # candidate touches the frame border; size ratios zeroed
    "iou_extrap",                      # IoU of the candidate with the extrapolated last box
)
N_FEATURES = len(FEATURE_NAMES)


def gap_sequence(max_gap: int) -> tuple[int, ...]:
    """``(1, 2, 4, ..., max_gap)``; ``max_gap`` must be a power of two."""
    if max_gap < 1 or max_gap & (max_gap - 1):
        raise ValueError(f"max gap {max_gap} is not a power of two")
    return tuple(1 << i for i in range(max_gap.bit_length()))


@dataclass
class TrackPrefix:
    id: int
    detections: list[Detection]
    t_elapsed: list[int] = field(default_factory=list)
    misses: int = 0

    def __post_init__(self):
        if not self.t_elapsed:
            self.t_elapsed = [b.frame - a.frame for a, b in zip(self.detections, self.detections[1:])]

    @property
    def last(self) -> Detection:
        return self.detections[-1]

    def append(self, d: Detection) -> None:
        self.t_elapsed.append(d.frame - self.last.frame)
        self.detections.append(d)
        self.misses = 0

    def velocity(self) -> tuple[float, float]:
        """Velocity from the last two detections, px/frame; zero for a single detection."""
        if len(self.detections) < 2:
            return 0.0, 0.0
        a, b = self.detections[-2], self.detections[-1]
        dt = b.frame - a.frame
        return (b.x - a.x) / dt, (b.y - a.y) / dt

    def mean_velocity(self, window: int = 5) -> tuple[float, float]:
        """Velocity across the last ``window`` detections; steadier than :meth:`velocity` under jitter."""
        if len(self.detections) < 2:
            return 0.0, 0.0
        a, b = self.detections[-min(window, len(self.detections))], self.detections[-1]
        dt = b.frame - a.frame
        return (b.x - a.x) / dt, (b.y - a.y) / dt

    def to_track(self, category: str | None = None) -> Track:
        return Track(self.id, category or self.detections[0].category, tuple(self.detections))


def _prefix_summary(prefixes: Sequence[TrackPrefix]) -> np.ndarray:
    rows = []
    for p in prefixes:
        last = p.last
        vx, vy = p.velocity()
        mx, my = p.mean_velocity()
        rows.append((last.frame, last.x, last.y, last.w, last.h, vx, vy, mx, my, len(p.detections)))
    return np.array(rows, dtype=float).reshape(-1, 10)


def _center_iou(ax, ay, aw, ah, bx, by, bw, bh):
    iw = np.clip(np.minimum(ax + aw / 2, bx + bw / 2) - np.maximum(ax - aw / 2, bx - bw / 2), 0, None)
    ih = np.clip(np.minimum(ay + ah / 2, by + bh / 2) - np.maximum(ay - ah / 2, by - bh / 2), 0, None)
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _features(summary: np.ndarray, dets: np.ndarray, t: np.ndarray, frame_w: float, frame_h: float) -> np.ndarray:
    """Feature tensor of shape (P, D, N_FEATURES)."""
    S = summary[:, None, :]
    D = dets[None, :, :]
    dx, dy = D[..., 0] - S[..., 1], D[..., 1] - S[..., 2]
    rx, ry = dx - S[..., 5] * t, dy - S[..., 6] * t
    ax, ay = dx - S[..., 7] * t, dy - S[..., 8] * t
    size = np.sqrt(S[..., 3] * S[..., 4])
    res = np.hypot(rx, ry)
    lw, lh = np.log(D[..., 2] / S[..., 3]), np.log(D[..., 3] / S[..., 4])
    diag = math.hypot(frame_w, frame_h)
    tt = t.astype(float) * np.ones_like(dx)
    single = (S[..., 9] < 2).astype(float) * np.ones_like(dx)
    margin = 1.0
    edge = ((D[..., 0] - D[..., 2] / 2 <= margin) | (D[..., 1] - D[..., 3] / 2 <= margin)
            | (D[..., 0] + D[..., 2] / 2 >= frame_w - margin)
            | (D[..., 1] + D[..., 3] / 2 >= frame_h - margin)).astype(float) * np.ones_like(dx)
    # clipping at the border changes box size without the object changing
    lw, lh = lw * (1 - edge), lh * (1 - edge)
    feats = np.stack([
        dx / (frame_w * t), dy / (frame_h * t),
        rx / frame_w, ry / frame_h,
        res / diag,
        res / size,
        np.hypot(ax, ay) / size,
        lw, lh, np.abs(lw + lh),
        tt,
        np.log(S[..., 9]) * np.ones_like(dx),
        np.log(res / size + 0.05),
        np.log(np.hypot(ax, ay) / size + 0.05),
        np.log(tt),
        single,
        single * np.log(tt),
        edge,
        _center_iou(S[..., 1] + S[..., 7] * t, S[..., 2] + S[..., 8] * t, S[..., 3], S[..., 4],
                    D[..., 0], D[..., 1], D[..., 2], D[..., 3]),
    ], axis=-1)
    return feats


def extract_features(prefix: TrackPrefix, d: Detection, t_elapsed: int,
                     frame_size: tuple[int, int] = (640, 352)) -> np.ndarray:
    """Features describing how well ``d`` continues ``prefix`` after ``t_elapsed`` frames."""
    summary = _prefix_summary([prefix])
    det = np.array([[d.x, d.y, d.w, d.h]])
    t = np.array([[float(t_elapsed)]])
    return _features(summary, det, t, *frame_size)[0, 0]


def pair_features(prefixes: Sequence[TrackPrefix], detections: Sequence[Detection], frame: int,
                  frame_size: tuple[int, int]) -> np.ndarray:
    summary = _prefix_summary(prefixes)
    dets = np.array([[d.x, d.y, d.w, d.h] for d in detections], dtype=float).reshape(-1, 4)
    t = frame - summary[:, 0:1]
    return _features(summary, dets, t, *frame_size)


class PairScorer(Protocol):
    def score_pairs(self, prefixes: Sequence[TrackPrefix], detections: Sequence[Detection],
                    frame: int) -> np.ndarray: ...


class SortScorer:
    """IoU between a prefix's box extrapolated at constant velocity and each detection."""

    matcher = "greedy"

    def __init__(self, iou_threshold: float = 0.1):
        self.iou_threshold = iou_threshold

    @property
    def floor(self) -> float:
        return self.iou_threshold

    def score_pairs(self, prefixes, detections, frame):
        if not prefixes or not detections:
            return np.zeros((len(prefixes), len(detections)))
        pred = []
        for p in prefixes:
            vx, vy = p.velocity()
            t = frame - p.last.frame
            pred.append((p.last.x + vx * t, p.last.y + vy * t, p.last.w, p.last.h))
        return iou_matrix(pred, [(d.x, d.y, d.w, d.h) for d in detections])


def hungarian(scores: np.ndarray, floor: float) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Maximum-total-score matching over pairs scoring at least ``floor``.

    Returns ``(pairs, unmatched_rows, unmatched_cols)``. Sub-floor pairs are
    excluded before solving, so they never displace an admissible pair.
    """
    scores = np.asarray(scores, dtype=float)
    n_rows, n_cols = scores.shape if scores.ndim == 2 else (0, 0)
    pairs: list[tuple[int, int]] = []
    if n_rows and n_cols:
        admissible = scores >= floor
        gain = np.where(admissible, scores, 0.0)
        rows, cols = linear_sum_assignment(gain, maximize=True)
        pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols) if admissible[r, c])
    used_r = {r for r, _ in pairs}
    used_c = {c for _, c in pairs}
    return (pairs, [r for r in range(n_rows) if r not in used_r], [c for c in range(n_cols) if c not in used_c])


def greedy_match(scores: np.ndarray, floor: float) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    scores = np.asarray(scores, dtype=float)
    n_rows, n_cols = scores.shape if scores.ndim == 2 else (0, 0)
    order = sorted(((-scores[r, c], r, c) for r in range(n_rows) for c in range(n_cols)
                    if scores[r, c] >= floor))
    used_r, used_c, pairs = set(), set(), []
    for _, r, c in order:
        if r not in used_r and c not in used_c:
            used_r.add(r)
            used_c.add(c)
            pairs.append((r, c))
    pairs.sort()
    return (pairs, [r for r in range(n_rows) if r not in used_r], [c for c in range(n_cols) if c not in used_c])


def step(active: list[TrackPrefix], detections: Sequence[Detection], frame: int, scorer: PairScorer,
         floor: float = 0.5, patience: int = 2, next_id: int = 0,
         matcher: str | None = None) -> tuple[list[TrackPrefix], list[TrackPrefix], int]:
    """Advance tracking by one sampled frame.

    Returns ``(active, closed, next_id)``. Matched detections extend their
    prefix; unmatched detections start new prefixes; a prefix left unmatched on
    more than ``patience`` consecutive sampled frames is closed.
    """
    if any(p.last.frame >= frame for p in active):
        raise ValueError("frame must be later than every active prefix")
    matcher = matcher or getattr(scorer, "matcher", "hungarian")
    if active and detections:
        scores = scorer.score_pairs(active, detections, frame)
        match = greedy_match if matcher == "greedy" else hungarian
        pairs, lost, fresh = match(scores, floor)
    else:
        pairs, lost, fresh = [], list(range(len(active))), list(range(len(detections)))
    for r, c in pairs:
        active[r].append(detections[c])
    closed = []
    keep = []
    lost_set = set(lost)
    for i, p in enumerate(active):
        if i in lost_set:
            p.misses += 1
            if p.misses > patience:
                closed.append(p)
                continue
        keep.append(p)
    for c in fresh:
        keep.append(TrackPrefix(next_id, [detections[c]]))
        next_id += 1
    return keep, closed, next_id


class OnlineTracker:
    """Stateful wrapper around :func:`step` for one clip."""

    def __init__(self, scorer: PairScorer, floor: float | None = None, patience: int = 2):
        self.scorer = scorer
        self.floor = getattr(scorer, "floor", 0.5) if floor is None else floor
        self.patience = patience
        self.active: list[TrackPrefix] = []
        self.closed: list[TrackPrefix] = []
        self.next_id = 0
        self.pairs_scored = 0

    def update(self, frame: int, detections: Sequence[Detection]) -> None:
        self.pairs_scored += len(self.active) * len(detections)
        self.active, closed, self.next_id = step(self.active, detections, frame, self.scorer,
                                                 self.floor, self.patience, self.next_id)
        self.closed.extend(closed)

    def finish(self) -> list[Track]:
        prefixes = sorted(self.closed + self.active, key=lambda p: p.id)
        return [p.to_track() for p in prefixes]


# --------------------------------------------------------------------------- training data

@dataclass
class TrainingExample:
    prefix: tuple[Detection, ...]
    candidate: Detection
    label: int
    t_elapsed: int
    gap: int


def subsample(detections: Sequence[Detection], gap: int) -> list[Detection]:
    """Keep the first detection, then each next one at least ``gap`` frames after the last kept."""
    out = [detections[0]]
    for d in detections[1:]:
        if d.frame - out[-1].frame >= gap:
            out.append(d)
    return out


def sample_training_examples(clips: Sequence[Sequence[Track]], gaps: Sequence[int], count: int,
                             rng: np.random.Generator) -> list[TrainingExample]:
    """Gap-sampled match / non-match examples drawn from reference tracks.

    ``clips`` groups tracks by clip so that "same frame" is meaningful. Each
    example samples a track and a gap uniformly, subsamples the track at that
    gap, and cuts it at a random point. Positives use the track's own next
    detection. Negatives use another track's detection in the same frame (or
    later in the same gap window), falling back to a displaced copy of the
    positive when no other track is around.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    pool = [(ci, t) for ci, tracks in enumerate(clips) for t in tracks if len(t) >= 2]
    n_tracks = sum(len(tr) for tr in clips)
    if n_tracks < 2:
        raise ValueError("need at least two tracks to form negative examples")
    if not pool:
        raise ValueError("no track has two or more detections")
    at_frame: list[dict[int, list[tuple[int, Detection]]]] = []
    for tracks in clips:
        idx: dict[int, list[tuple[int, Detection]]] = {}
        for t in tracks:
            for d in t.detections:
                idx.setdefault(d.frame, []).append((t.id, d))
        at_frame.append(idx)
    out = []
    while len(out) < count:
        ci, track = pool[int(rng.integers(len(pool)))]
        g = int(gaps[int(rng.integers(len(gaps)))])
        sub = subsample(track.detections, g)
        if len(sub) < 2:
            continue
        i = int(rng.integers(1, len(sub)))
        prefix, pos = tuple(sub[:i]), sub[i]
        if rng.random() < 0.5:
            out.append(TrainingExample(prefix, pos, 1, pos.frame - prefix[-1].frame, g))
            continue
        others = [d for tid, d in at_frame[ci].get(pos.frame, []) if tid != track.id]
        if not others:
            for f in range(prefix[-1].frame + 1, pos.frame + g + 1):
                others.extend(d for tid, d in at_frame[ci].get(f, []) if tid != track.id)
        if others:
            neg = others[int(rng.integers(len(others)))]
        else:
            ang = rng.uniform(0, 2 * math.pi)
            dist = rng.uniform(1.5, 4.0) * math.sqrt(pos.w * pos.h)
            neg = Detection(pos.frame, pos.x + dist * math.cos(ang), pos.y + dist * math.sin(ang),
                            pos.w, pos.h, pos.confidence, pos.category)
        out.append(TrainingExample(prefix, neg, 0, neg.frame - prefix[-1].frame, g))
    return out


def example_features(examples: Sequence[TrainingExample], frame_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([extract_features(TrackPrefix(-1, list(e.prefix)), e.candidate, e.t_elapsed, frame_size)
                  for e in examples]).reshape(-1, N_FEATURES)
    y = np.array([e.label for e in examples], dtype=int)
    return X, y
