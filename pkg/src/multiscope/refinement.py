"""Extend reduced-rate tracks to their likely start and end using clustered reference paths."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.cluster import DBSCAN
from sklearn.utils.validation import check_is_fitted

from .geometry import Detection, Track, UnrefinableTrackError, resample_path

N_POINTS = 20


def track_distance(a: Track | np.ndarray, b: Track | np.ndarray, n: int = N_POINTS) -> float:
    """Mean distance between corresponding evenly spaced points of two paths."""
    pa = a if isinstance(a, np.ndarray) else resample_path(a, n)
    pb = b if isinstance(b, np.ndarray) else resample_path(b, n)
    return float(np.mean(np.hypot(*(pa - pb).T)))


def distance_matrix(paths: Sequence[np.ndarray]) -> np.ndarray:
    P = np.asarray(paths, dtype=float)
    if len(P) == 0:
        return np.zeros((0, 0))
    diff = P[:, None, :, :] - P[None, :, :, :]
    return np.hypot(diff[..., 0], diff[..., 1]).mean(axis=-1)


def dbscan(tracks: Sequence[Track], eps: float, min_pts: int = 2,
           n: int = N_POINTS) -> tuple[list[list[int]], list[int]]:
    """Cluster tracks under :func:`track_distance`.

    Returns ``(clusters, noise)`` as lists of indices into ``tracks``. A point is
    core when at least ``min_pts`` tracks, itself included, lie within ``eps``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not tracks:
        return [], []
    D = distance_matrix([resample_path(t, n) for t in tracks])
    labels = DBSCAN(eps=eps, min_samples=min_pts, metric="precomputed").fit_predict(D)
    clusters: dict[int, list[int]] = defaultdict(list)
    noise = []
    for i, lab in enumerate(labels):
        (noise.append(i) if lab < 0 else clusters[int(lab)].append(i))
    return [clusters[k] for k in sorted(clusters)], noise


def cluster_center(members: Sequence[Track | np.ndarray], n: int = N_POINTS) -> np.ndarray:
    paths = [m if isinstance(m, np.ndarray) else resample_path(m, n) for m in members]
    if not paths:
        raise ValueError("empty cluster")
    return np.mean(paths, axis=0)


@dataclass
class TrackCluster:
    members: int
    center: np.ndarray  # (N_POINTS, 2)

    def to_dict(self) -> dict:
        return {"members": self.members, "center": self.center.tolist()}


def _segment_cells(p: np.ndarray, q: np.ndarray, cell: float) -> set[tuple[int, int]]:
    """Grid cells crossed by segment ``p``-``q`` (cells only touched at a corner excluded)."""
    ts = [0.0, 1.0]
    for axis in (0, 1):
        a, b = p[axis], q[axis]
        if a != b:
            lo, hi = sorted((a, b))
            k = math.floor(lo / cell) + 1
            while k * cell < hi:
                ts.append((k * cell - a) / (b - a))
                k += 1
    ts = sorted(set(ts))
    cells = {(math.floor(p[0] / cell), math.floor(p[1] / cell)), (math.floor(q[0] / cell), math.floor(q[1] / cell))}
    for t0, t1 in zip(ts, ts[1:]):
        m = p + (q - p) * ((t0 + t1) / 2)
        cells.add((math.floor(m[0] / cell), math.floor(m[1] / cell)))
    return cells


class PathGridIndex:
    """Maps each grid cell to the ids of the paths whose polyline passes through it."""

    def __init__(self, cell_size: float = 32.0):
        self.cell_size = cell_size
        self.cells: dict[tuple[int, int], list[int]] = defaultdict(list)

    def add(self, path_id: int, path: np.ndarray) -> None:
        seen: set[tuple[int, int]] = set()
        for p, q in zip(path, path[1:]):
            seen |= _segment_cells(p, q, self.cell_size)
        for c in sorted(seen):
            self.cells[c].append(path_id)

    def near(self, x: float, y: float) -> set[int]:
        """Paths crossing the point's cell or one of its eight neighbours."""
        cx, cy = math.floor(x / self.cell_size), math.floor(y / self.cell_size)
        out: set[int] = set()
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                out.update(self.cells.get((cx + dx, cy + dy), ()))
        return out

    def to_dict(self) -> dict:
        return {"cell_size": self.cell_size,
                "cells": [[c[0], c[1], ids] for c, ids in sorted(self.cells.items())]}


def weighted_median(values: Sequence[float], weights: Sequence[int]) -> float:
    """Lower weighted median: the first value whose cumulative weight reaches half the total."""
    order = np.argsort(values, kind="stable")
    v = np.asarray(values, dtype=float)[order]
    w = np.asarray(weights, dtype=float)[order]
    cum = np.cumsum(w)
    return float(v[np.searchsorted(cum, cum[-1] / 2.0)])


def refine(track: Track, index: PathGridIndex, clusters: Sequence[TrackCluster], k: int = 10,
           clip_length: int | None = None, n: int = N_POINTS) -> tuple[Track, bool]:
    """Prepend/append estimated start and end detections to ``track``.

    Returns ``(track, refined)``; ``refined`` is False when the track cannot be
    resampled or no cluster center passes near either endpoint.
    """
    if len(track) < 2 or not clusters:
        return track, False
    cand = index.near(track.first.x, track.first.y) | index.near(track.last.x, track.last.y)
    if not cand:
        return track, False
    path = resample_path(track, n)
    ranked = sorted(cand, key=lambda c: (track_distance(path, clusters[c].center), c))
    chosen, mult = [], 0
    for c in ranked:
        chosen.append(c)
        mult += clusters[c].members
        if mult >= k:
            break
    weights = [clusters[c].members for c in chosen]
    start = [weighted_median([clusters[c].center[0, dim] for c in chosen], weights) for dim in (0, 1)]
    end = [weighted_median([clusters[c].center[-1, dim] for c in chosen], weights) for dim in (0, 1)]

    dets = list(track.detections)
    first, second = dets[0], dets[1]
    last, prev = dets[-1], dets[-2]
    v0 = math.hypot(second.x - first.x, second.y - first.y) / (second.frame - first.frame)
    v1 = math.hypot(last.x - prev.x, last.y - prev.y) / (last.frame - prev.frame)

    def offset(dist: float, speed: float) -> int:
        return max(1, int(round(dist / speed))) if speed > 1e-9 else 1

    f_start = first.frame - offset(math.hypot(start[0] - first.x, start[1] - first.y), v0)
    f_start = max(0, f_start)
    if f_start < first.frame:
        dets.insert(0, Detection(f_start, start[0], start[1], first.w, first.h, first.confidence, first.category))
    f_end = last.frame + offset(math.hypot(end[0] - last.x, end[1] - last.y), v1)
    if clip_length is not None:
        f_end = min(clip_length - 1, f_end)
    if f_end > last.frame:
        dets.append(Detection(f_end, end[0], end[1], last.w, last.h, last.confidence, last.category))
    return Track(track.id, track.category, tuple(dets)), True


class TrackRefiner(TransformerMixin, BaseEstimator):
    """Fit on full-rate reference tracks; transform reduced-rate tracks by extending their ends.

    Parameters
    ----------
    eps : float or None
        DBSCAN radius in pixels; None means 5% of the frame diagonal.
    min_pts : int, default=2
    k : int, default=10
        Neighbour multiplicity; a cluster of n tracks counts n times.
    cell_size : float, default=32
    frame_size : tuple of int
    clip_length : int or None
        Clamp extended timestamps to ``[0, clip_length - 1]``.
    """

    def __init__(self, eps=None, min_pts=2, k=10, cell_size=32.0, frame_size=(640, 352), clip_length=None):
        self.eps = eps
        self.min_pts = min_pts
        self.k = k
        self.cell_size = cell_size
        self.frame_size = frame_size
        self.clip_length = clip_length

    def fit(self, X, y=None):
        tracks = [t for t in X if len(t) >= 2]
        eps = self.eps if self.eps is not None else 0.05 * math.hypot(*self.frame_size)
        groups, noise = dbscan(tracks, eps, self.min_pts)
        groups = groups + [[i] for i in noise]
        self.clusters_ = [TrackCluster(len(g), cluster_center([tracks[i] for i in g])) for g in groups]
        self.index_ = PathGridIndex(self.cell_size)
        for cid, c in enumerate(self.clusters_):
            self.index_.add(cid, c.center)
        return self

    def refine_one(self, track: Track) -> tuple[Track, bool]:
        check_is_fitted(self, "clusters_")
        return refine(track, self.index_, self.clusters_, self.k, self.clip_length)

    def transform(self, X):
        return [self.refine_one(t)[0] for t in X]

    def to_dict(self) -> dict:
        check_is_fitted(self, "clusters_")
        return {"format": "multiscope.refiner", "version": 1,
                "params": {"eps": self.eps, "min_pts": self.min_pts, "k": self.k, "cell_size": self.cell_size,
                           "frame_size": list(self.frame_size), "clip_length": self.clip_length},
                "clusters": [c.to_dict() for c in self.clusters_],
                "index": self.index_.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrackRefiner":
        p = dict(d["params"])
        p["frame_size"] = tuple(p["frame_size"])
        est = cls(**p)
        est.clusters_ = [TrackCluster(c["members"], np.array(c["center"])) for c in d["clusters"]]
        est.index_ = PathGridIndex(est.cell_size)
        for cid, c in enumerate(est.clusters_):
            est.index_.add(cid, c.center)
        return est

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "TrackRefiner":
        with open(path) as f:
            return cls.from_dict(json.load(f))
