"""Boxes, tracks, cell grids and the small geometric helpers shared by every stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CELL_SIZE = 32


class UnrefinableTrackError(ValueError):
    """Raised when a track has too few detections to be resampled as a path."""


@dataclass(frozen=True)
class Detection:
    """A box at one frame. ``x``/``y`` are the box center, ``w``/``h`` its extent."""

    frame: int
    x: float
    y: float
    w: float
    h: float
    confidence: float = 1.0
    category: str = "object"

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extent must be positive, got w={self.w} h={self.h}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    def to_dict(self) -> dict:
        return {"frame": self.frame, "x": self.x, "y": self.y, "w": self.w, "h": self.h,
                "confidence": self.confidence}

    @classmethod
    def from_dict(cls, d: dict, category: str = "object") -> "Detection":
        return cls(int(d["frame"]), float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]),
                   float(d.get("confidence", 1.0)), d.get("category", category))


def clipped_detection(frame: int, x0: float, y0: float, x1: float, y1: float,
                      frame_w: int, frame_h: int, confidence: float = 1.0,
                      category: str = "object") -> Detection | None:
    """Build a detection from corners, clipped to the frame. None if nothing is left."""
    x0, x1 = max(0.0, x0), min(float(frame_w), x1)
    y0, y1 = max(0.0, y0), min(float(frame_h), y1)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return Detection(frame, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, confidence, category)


@dataclass(frozen=True)
class Track:
    id: int
    category: str
    detections: tuple[Detection, ...]

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        if not self.detections:
            raise ValueError("a track needs at least one detection")
        frames = [d.frame for d in self.detections]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"track {self.id}: frame indices must strictly increase")

    def __len__(self):
        return len(self.detections)

    @property
    def first(self) -> Detection:
        return self.detections[0]

    @property
    def last(self) -> Detection:
        return self.detections[-1]

    @property
    def duration(self) -> int:
        return self.last.frame - self.first.frame

    def centers(self) -> np.ndarray:
        return np.array([[d.x, d.y] for d in self.detections], dtype=float)

    def to_dict(self) -> dict:
        return {"id": self.id, "category": self.category,
                "detections": [d.to_dict() for d in self.detections]}

    @classmethod
    def from_dict(cls, d: dict) -> "Track":
        cat = d.get("category", "object")
        return cls(d["id"], cat, tuple(Detection.from_dict(x, cat) for x in d["detections"]))


@dataclass(frozen=True, order=True)
class WindowSize:
    w: int
    h: int

    def __post_init__(self):
        if self.w < CELL_SIZE or self.h < CELL_SIZE or self.w % CELL_SIZE or self.h % CELL_SIZE:
            raise ValueError(f"window size {self.w}x{self.h} must be multiples of {CELL_SIZE}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def __str__(self):
        return f"{self.w}x{self.h}"

    @classmethod
    def parse(cls, text: str) -> "WindowSize":
        w, h = text.lower().split("x")
        return cls(int(w), int(h))


@dataclass(frozen=True)
class Rect:
    """Top-left anchored detector window, in native pixels."""

    x: int
    y: int
    w: int
    h: int

    @property
    def size(self) -> WindowSize:
        return WindowSize(self.w, self.h)

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px < self.x + self.w and self.y <= py < self.y + self.h

    def overlaps(self, box: Detection) -> bool:
        x0, y0, x1, y1 = box.corners()
        return min(x1, self.x + self.w) > max(x0, self.x) and min(y1, self.y + self.h) > max(y0, self.y)

    def contains_cell(self, col: int, row: int, cell: int = CELL_SIZE) -> bool:
        return (self.x <= col * cell and (col + 1) * cell <= self.x + self.w
                and self.y <= row * cell and (row + 1) * cell <= self.y + self.h)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass
class FrameGrid:
    """Per-cell proxy scores; ``scores`` is indexed ``[row, col]``."""

    cols: int
    rows: int
    scores: np.ndarray = field(repr=False)
    cell_size: int = CELL_SIZE

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).reshape(self.rows, self.cols)

    @classmethod
    def for_frame(cls, frame_w: int, frame_h: int, fill: float = 0.0) -> "FrameGrid":
        cols, rows = frame_w // CELL_SIZE, frame_h // CELL_SIZE
        return cls(cols, rows, np.full((rows, cols), fill))


def iou(a: Detection, b: Detection) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (a.area + b.area - inter))


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for center-form ``(x, y, w, h)`` arrays."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    a0, a1 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b0, b1 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.minimum(inter / union, 1.0)


def resample_path(track: Track | Sequence[Sequence[float]], n: int) -> np.ndarray:
    """Return ``n`` points evenly spaced by arc length along the polyline of box centers."""
    pts = track.centers() if isinstance(track, Track) else np.asarray(track, dtype=float)
    if len(pts) < 2:
        raise UnrefinableTrackError("need at least two detections to resample a path")
    if n < 2:
        raise ValueError("n must be at least 2")
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        return np.repeat(pts[:1], n, axis=0)
    targets = np.linspace(0.0, total, n)
    out = np.column_stack([np.interp(targets, cum, pts[:, 0]), np.interp(targets, cum, pts[:, 1])])
    # interp picks the first of duplicated knots; endpoints must be exact
    out[0], out[-1] = pts[0], pts[-1]
    return out


def cells_intersecting(box: Detection, cols: int, rows: int,
                       cell: int = CELL_SIZE) -> set[tuple[int, int]]:
    """Cells whose square overlaps ``box`` with positive area (edge contact excluded)."""
    x0, y0, x1, y1 = box.corners()
    c0, c1 = max(0, math.floor(x0 / cell)), min(cols - 1, math.ceil(x1 / cell) - 1)
    r0, r1 = max(0, math.floor(y0 / cell)), min(rows - 1, math.ceil(y1 / cell) - 1)
    return {(c, r) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)}


def cell_labels(boxes: Iterable[Detection], cols: int, rows: int) -> np.ndarray:
    """0/1 grid marking cells that intersect at least one box."""
    labels = np.zeros((rows, cols), dtype=float)
    for box in boxes:
        for c, r in cells_intersecting(box, cols, rows):
            labels[r, c] = 1.0
    return labels


def point_in_polygon(px: float, py: float, polygon: Sequence[Sequence[float]]) -> bool:
    """Even-odd test; points on an edge or vertex count as inside."""
    n = len(polygon)
    inside = False
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        # on-segment check
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        if abs(cross) <= 1e-9 and min(x1, x2) - 1e-9 <= px <= max(x1, x2) + 1e-9 \
                and min(y1, y2) - 1e-9 <= py <= max(y1, y2) + 1e-9:
            return True
        if (y1 > py) != (y2 > py):
            xcross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < xcross:
                inside = not inside
    return inside
