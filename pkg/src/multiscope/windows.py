"""Turn per-cell proxy scores into detector windows drawn from a small fixed set of sizes."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import CELL_SIZE, Detection, FrameGrid, Rect, WindowSize, cells_intersecting
from .sim import CostModel, MissingCostError

Cell = tuple[int, int]  # (col, row)


@dataclass
class WindowPlan:
    rects: list[Rect]
    covered_cells: set[Cell] = field(default_factory=set)
    passes: int = 0
    fallback: bool = False

    def to_dict(self) -> dict:
        return {"rects": [r.to_dict() for r in self.rects],
                "covered_cells": sorted(map(list, self.covered_cells)),
                "fallback": self.fallback}


def threshold(grid: FrameGrid, b_proxy: float) -> set[Cell]:
    rows, cols = np.nonzero(grid.scores > b_proxy)
    return {(int(c), int(r)) for r, c in zip(rows, cols)}


def _mask(cells: Iterable[Cell]) -> np.ndarray:
    cells = list(cells)
    if not cells:
        return np.zeros((0, 0), dtype=bool)
    if min(min(c, r) for c, r in cells) < 0:
        raise ValueError("cells must have non-negative coordinates")
    m = np.zeros((max(r for _, r in cells) + 1, max(c for c, _ in cells) + 1), dtype=bool)
    for c, r in cells:
        m[r, c] = True
    return m


def connected_components(cells: Iterable[Cell]) -> list[list[Cell]]:
    """4-connected components, each sorted, ordered by their first cell in row-major scan."""
    labels, n = ndimage.label(_mask(cells))
    rows, cols = np.nonzero(labels)  # row-major, so each component comes out sorted
    comps: list[list[Cell]] = [[] for _ in range(n)]
    for r, c in zip(rows.tolist(), cols.tolist()):
        comps[labels[r, c] - 1].append((c, r))
    return comps


def _mask_clusters(mask: np.ndarray) -> list[list]:
    """Cluster records for the 4-connected components of ``mask``, in row-major order of first cell."""
    labels, n = ndimage.label(mask)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols] - 1
    cnt = np.bincount(lab, minlength=n)
    sc = np.bincount(lab, weights=cols, minlength=n)
    sr = np.bincount(lab, weights=rows, minlength=n)
    c0 = np.full(n, np.iinfo(np.int64).max)
    r0 = np.full(n, np.iinfo(np.int64).max)
    c1 = np.full(n, -1)
    r1 = np.full(n, -1)
    np.minimum.at(c0, lab, cols)
    np.minimum.at(r0, lab, rows)
    np.maximum.at(c1, lab, cols)
    np.maximum.at(r1, lab, rows)
    return [[int(c0[k]), int(r0[k]), int(c1[k]), int(r1[k]), float(sc[k]), float(sr[k]), int(cnt[k])]
            for k in range(n)]


def est_time(rects: Sequence[Rect], costs: Mapping[WindowSize, float]) -> float:
    total = 0.0
    for r in rects:
        try:
            total += costs[r.size]
        except KeyError:
            raise MissingCostError(f"no cost for window size {r.size}") from None
    return total


def _ordered(sizes: Iterable[WindowSize]) -> list[WindowSize]:
    return sorted(set(sizes), key=lambda s: (s.area, s.w, s.h))


def smallest_window_for(bbox_w: float, bbox_h: float, sizes: Iterable[WindowSize]) -> WindowSize:
    """Smallest-area size (then narrowest) containing a ``bbox_w`` x ``bbox_h`` box."""
    ordered = _ordered(sizes)
    for s in ordered:
        if s.w >= bbox_w and s.h >= bbox_h:
            return s
    return ordered[-1]  # the full frame is always the largest size


def window_costs(cost: CostModel, arch: str, sizes: Iterable[WindowSize],
                 resolution: WindowSize | None = None, frame_w: int | None = None,
                 frame_h: int | None = None) -> dict[WindowSize, float]:
    sx = sy = 1.0
    if resolution is not None:
        sx, sy = resolution.w / frame_w, resolution.h / frame_h
    return {s: cost.detector_time(arch, s.w, s.h, sx, sy) for s in sizes}


# A cluster during grouping: [c0, r0, c1, r1, sum_col, sum_row, n_cells]

def _as_cluster(comp: Sequence[Cell]) -> list:
    cs = [c for c, _ in comp]
    rs = [r for _, r in comp]
    return [min(cs), min(rs), max(cs), max(rs), float(sum(cs)), float(sum(rs)), len(comp)]


def _union(a: list, b: list) -> list:
    return [min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]),
            a[4] + b[4], a[5] + b[5], a[6] + b[6]]


def _extent(c: list) -> tuple[int, int]:
    return (c[2] - c[0] + 1) * CELL_SIZE, (c[3] - c[1] + 1) * CELL_SIZE


def _fit(c: list, ordered: list[WindowSize]) -> WindowSize:
    bw, bh = _extent(c)
    for s in ordered:
        if s.w >= bw and s.h >= bh:
            return s
    return ordered[-1]


def _merge(clusters: list[list], ordered: list[WindowSize],
           costs: Mapping[WindowSize, float]) -> tuple[list[list], list[WindowSize], int]:
    """Greedy agglomeration. Returns clusters, their window sizes and the pass count.

    Clusters are visited in list order. Each one is merged with its nearest
    neighbour by centroid (ties to the lower index) and then, scanning in index
    order, with every other cluster that still fits the merged window. The merge
    is kept only if that window is strictly cheaper than the members' own
    windows; the merged cluster takes the lowest member's slot.
    """
    clusters = [list(c) for c in clusters]
    cents = [(c[4] / c[6], c[5] / c[6]) for c in clusters]
    passes, changed = 0, True
    while changed:
        changed = False
        passes += 1
        i = 0
        while i < len(clusters) and len(clusters) > 1:
            ci = clusters[i]
            cx, cy = cents[i]
            best, j = None, -1
            for k, (kx, ky) in enumerate(cents):
                if k != i:
                    d = (kx - cx) ** 2 + (ky - cy) ** 2
                    if best is None or d < best:
                        best, j = d, k
            merged = _union(ci, clusters[j])
            size = _fit(merged, ordered)
            lim_w, lim_h = size.w // CELL_SIZE, size.h // CELL_SIZE
            members = [i, j]
            m0, m1, m2, m3 = merged[0], merged[1], merged[2], merged[3]
            for k, ck in enumerate(clusters):
                if k == i or k == j:
                    continue
                n0, n1 = min(m0, ck[0]), min(m1, ck[1])
                n2, n3 = max(m2, ck[2]), max(m3, ck[3])
                if n2 - n0 + 1 <= lim_w and n3 - n1 + 1 <= lim_h:
                    m0, m1, m2, m3 = n0, n1, n2, n3
                    merged[4] += ck[4]
                    merged[5] += ck[5]
                    merged[6] += ck[6]
                    members.append(k)
            merged[0], merged[1], merged[2], merged[3] = m0, m1, m2, m3
            separate = sum(costs[_fit(clusters[m], ordered)] for m in members)
            if costs[size] < separate:
                pos = min(members)
                gone = set(members)
                keep = [k for k in range(len(clusters)) if k not in gone]
                insert_at = sum(1 for k in range(pos) if k not in gone)
                clusters = [clusters[k] for k in keep]
                cents = [cents[k] for k in keep]
                clusters.insert(insert_at, merged)
                cents.insert(insert_at, (merged[4] / merged[6], merged[5] / merged[6]))
                changed = True
                i = insert_at + 1
            else:
                i += 1
    return clusters, [_fit(c, ordered) for c in clusters], passes


def _place(c: list, size: WindowSize, frame_w: int, frame_h: int) -> Rect:
    """Center ``size`` on the cluster's bounding box, snapped to cells and clamped to the frame."""
    x0, y0 = c[0] * CELL_SIZE, c[1] * CELL_SIZE
    bw, bh = _extent(c)
    x = x0 - ((size.w - bw) // CELL_SIZE // 2) * CELL_SIZE
    y = y0 - ((size.h - bh) // CELL_SIZE // 2) * CELL_SIZE
    x = min(max(0, x), frame_w - size.w)
    y = min(max(0, y), frame_h - size.h)
    return Rect(x, y, size.w, size.h)


def group_cells(cells: Iterable[Cell], sizes: Iterable[WindowSize], costs: Mapping[WindowSize, float],
                frame_w: int, frame_h: int) -> WindowPlan:
    """Cover positive cells with windows from ``sizes``.

    One cluster per connected component; each pass tries, in cluster order, to
    merge a cluster with its nearest neighbour (centroid distance) plus any other
    cluster that fits the merged window without enlarging it, keeping the merge
    only when one window is cheaper than the separate ones. If the result costs
    more than a single full-frame window, the full frame is used instead.
    """
    cells = set(cells)
    if not cells:
        return WindowPlan([], set(), 0)
    return _plan(_mask_clusters(_mask(cells)), cells, sizes, costs, frame_w, frame_h)


def plan_grid(grid: FrameGrid, b_proxy: float, sizes: Iterable[WindowSize], costs: Mapping[WindowSize, float],
              frame_w: int, frame_h: int) -> WindowPlan:
    """``group_cells(threshold(grid, b_proxy), ...)`` without building the cell set first."""
    mask = grid.scores > b_proxy
    rows, cols = np.nonzero(mask)
    return _plan(_mask_clusters(mask), set(zip(cols.tolist(), rows.tolist())), sizes, costs, frame_w, frame_h)


def _plan(clusters: list[list], cells, sizes: Iterable[WindowSize], costs: Mapping[WindowSize, float],
          frame_w: int, frame_h: int) -> WindowPlan:
    full = WindowSize(frame_w, frame_h)
    ordered = _ordered(list(sizes) + [full])
    if not clusters:
        return WindowPlan([], set(cells), 0)
    clusters, fits, passes = _merge(clusters, ordered, costs)
    rects = [_place(c, s, frame_w, frame_h) for c, s in zip(clusters, fits)]
    if sum(costs[s] for s in fits) > costs[full]:
        return WindowPlan([Rect(0, 0, frame_w, frame_h)], cells, passes, fallback=True)
    return WindowPlan(rects, cells, passes)


def positive_cells(detections: Iterable[Detection], cols: int, rows: int) -> set[Cell]:
    out: set[Cell] = set()
    for d in detections:
        out |= cells_intersecting(d, cols, rows)
    return out


def _frame_time(clusters: list[list], ordered: list[WindowSize], costs: Mapping[WindowSize, float],
                full_cost: float) -> float:
    if not clusters:
        return 0.0
    _, fits, _ = _merge(clusters, ordered, costs)
    return min(sum(costs[s] for s in fits), full_cost)


def select_window_sizes(frames: Sequence[Sequence[Detection]], frame_w: int, frame_h: int, k: int,
                        cost_of: Callable[[WindowSize], float],
                        history: list | None = None) -> list[WindowSize]:
    """Greedily grow a size set from the full frame, minimising total planned detector time.

    Each frame's positive cells are taken to be exactly the cells its detections
    touch. Candidates are every size whose sides are multiples of the cell size;
    ties go to the smaller area, then the smaller width. ``history`` (if given)
    receives the objective after each step, starting with the full-frame-only set.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not frames:
        raise ValueError("need at least one training frame")
    cols, rows = frame_w // CELL_SIZE, frame_h // CELL_SIZE
    weights: Counter = Counter()
    for dets in frames:
        comps = connected_components(positive_cells(dets, cols, rows))
        weights[tuple(tuple(_as_cluster(c)) for c in comps)] += 1
    unique = [([list(c) for c in key], w) for key, w in sorted(weights.items(), key=lambda kv: str(kv[0]))]
    full = WindowSize(frame_w, frame_h)
    candidates = [WindowSize(w, h) for w in range(CELL_SIZE, frame_w + 1, CELL_SIZE)
                  for h in range(CELL_SIZE, frame_h + 1, CELL_SIZE)]
    cost_cache = {s: cost_of(s) for s in candidates}

    def tot_time(sizes: list[WindowSize]) -> float:
        ordered = _ordered(sizes)
        costs = {s: cost_cache[s] for s in ordered}
        return sum(w * _frame_time(cl, ordered, costs, costs[full]) for cl, w in unique)

    chosen = [full]
    best_total = tot_time(chosen)
    if history is not None:
        history.append(best_total)
    while len(chosen) < k:
        best = None
        for cand in sorted(set(candidates) - set(chosen), key=lambda s: (s.area, s.w)):
            t = tot_time(chosen + [cand])
            if best is None or t < best[0]:
                best = (t, cand)
        if best is None:
            break
        chosen.append(best[1])
        best_total = best[0]
        if history is not None:
            history.append(best_total)
    return _ordered(chosen)


def recall_runtime(frames: Sequence[tuple[FrameGrid, Sequence[Detection]]], b_proxy: float,
                   sizes: Sequence[WindowSize], costs: Mapping[WindowSize, float], proxy_time: float,
                   frame_w: int, frame_h: int,
                   memo: dict | None = None) -> tuple[float, float]:
    """Recall of reference detections under the planned windows, and the estimated runtime.

    Runtime is the proxy time per frame plus the planned window costs; recall is
    the fraction of reference boxes overlapping some planned window. ``memo``
    caches plans by positive-cell mask and may be shared between calls that
    use the same sizes and costs.
    """
    covered = total = 0
    runtime = 0.0
    memo = {} if memo is None else memo
    for grid, dets in frames:
        mask = grid.scores > b_proxy
        key = np.packbits(mask).tobytes()
        hit = memo.get(key)
        if hit is None:
            plan = _plan(_mask_clusters(mask), (), sizes, costs, frame_w, frame_h)
            boxes = np.array([[r.x, r.y, r.x + r.w, r.y + r.h] for r in plan.rects], dtype=float).reshape(-1, 4)
            hit = memo[key] = (est_time(plan.rects, costs), boxes)
        t, boxes = hit
        runtime += proxy_time + t
        total += len(dets)
        if dets and len(boxes):
            d = np.array([d.corners() for d in dets], dtype=float)
            ov = ((np.minimum(d[:, None, 2], boxes[None, :, 2]) > np.maximum(d[:, None, 0], boxes[None, :, 0]))
                  & (np.minimum(d[:, None, 3], boxes[None, :, 3]) > np.maximum(d[:, None, 1], boxes[None, :, 1])))
            covered += int(ov.any(axis=1).sum())
    return (covered / total if total else 1.0), runtime


class WindowPlanner(TransformerMixin, BaseEstimator):
    """Learns a window-size set from training detections, then plans windows per frame.

    Parameters
    ----------
    frame_w, frame_h : int
        Native frame size in pixels.
    cost_model : CostModel
        Prices each window size for ``arch`` at ``resolution``.
    arch : str
        Detector architecture used to price windows.
    resolution : WindowSize or None
        Detector input resolution; None means native.
    k : int, default=3
        Number of sizes, the full frame included.
    b_proxy : float, default=0.5
        Cells scoring strictly above this are positive in :meth:`transform`.
    max_frames : int or None
        Evenly subsample the training frames to at most this many.
    """

    def __init__(self, frame_w=640, frame_h=352, cost_model=None, arch="large", resolution=None,
                 k=3, b_proxy=0.5, max_frames=400):
        self.frame_w = frame_w
        self.frame_h = frame_h
        self.cost_model = cost_model
        self.arch = arch
        self.resolution = resolution
        self.k = k
        self.b_proxy = b_proxy
        self.max_frames = max_frames

    def _cost_of(self, size: WindowSize) -> float:
        costs = window_costs(self.cost_model, self.arch, [size], self.resolution, self.frame_w, self.frame_h)
        return costs[size]

    def fit(self, X, y=None):
        """``X`` is a sequence of per-frame detection lists."""
        frames = list(X)
        if self.max_frames and len(frames) > self.max_frames:
            idx = np.linspace(0, len(frames) - 1, self.max_frames).round().astype(int)
            frames = [frames[i] for i in idx]
        self.tot_time_history_ = []
        self.sizes_ = select_window_sizes(frames, self.frame_w, self.frame_h, self.k, self._cost_of,
                                          self.tot_time_history_)
        self.costs_ = {s: self._cost_of(s) for s in self.sizes_}
        return self

    def plan(self, grid: FrameGrid, b_proxy: float | None = None) -> WindowPlan:
        check_is_fitted(self, "sizes_")
        b = self.b_proxy if b_proxy is None else b_proxy
        return group_cells(threshold(grid, b), self.sizes_, self.costs_, self.frame_w, self.frame_h)

    def transform(self, X):
        return [self.plan(g) for g in X]


def save_sizes(sizes: Sequence[WindowSize], path, **extra) -> None:
    with open(path, "w") as f:
        json.dump({"sizes": [str(s) for s in sizes], **extra}, f, indent=1, sort_keys=True)


def load_sizes(path) -> list[WindowSize]:
    with open(path) as f:
        return [WindowSize.parse(s) for s in json.load(f)["sizes"]]
