"""Synthetic scenes plus simulated detector, proxy and cost model.

Everything that would be a neural network or a GPU timing in a real deployment is
replaced here by a seeded, deterministic stand-in:

* :func:`generate` draws objects moving along parametric paths and records the
  ground-truth tracks and per-pattern counts for each clip.
* :func:`detect` returns the ground-truth boxes whose centers fall inside the
  requested windows, with resolution-dependent misses and jitter, and charges
  :class:`CostModel` time per window.
* :func:`proxy_scores` returns per-cell scores that are the true cell labels with
  flip noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .geometry import (CELL_SIZE, Detection, FrameGrid, Rect, Track, WindowSize,
                       cell_labels, clipped_detection)
from .metrics import SpatialPattern, count_by_pattern

SPLITS = ("train", "val", "test")
DATASET_FORMAT = "multiscope.dataset"


class MissingCostError(KeyError):
    pass


# --------------------------------------------------------------------------- scenes

@dataclass(frozen=True)
class PathSpec:
    """Polyline an object follows from its entry to its exit, at a constant speed."""

    waypoints: tuple[tuple[float, float], ...]
    speed: tuple[float, float] = (4.0, 7.0)  # px/frame, sampled uniformly per object
    category: str = "car"

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(tuple(map(float, p)) for p in self.waypoints))
        object.__setattr__(self, "speed", tuple(map(float, self.speed)))
        if len(self.waypoints) < 2:
            raise ValueError("a path needs at least two waypoints")
        if not 0 < self.speed[0] <= self.speed[1]:
            raise ValueError("speed range must be positive and ordered")

    @cached_property
    def _arc(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.array(self.waypoints)
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        return pts, cum

    @property
    def length(self) -> float:
        return float(self._arc[1][-1])

    def point_at(self, s: float) -> tuple[float, float]:
        pts, cum = self._arc
        return float(np.interp(s, cum, pts[:, 0])), float(np.interp(s, cum, pts[:, 1]))


@dataclass(frozen=True)
class SceneSpec:
    frame_w: int = 640
    frame_h: int = 352
    fps: int = 10
    duration: int = 300
    clip_count: int = 60
    object_rate: float = 0.3  # new objects per second
    paths: tuple[PathSpec, ...] = ()
    object_size: tuple[float, float] = (28.0, 56.0)
    rng_seed: int = 0
    min_headway: int = 12  # frames between spawns on one path
    region_radius: float = 48.0  # half-side of the square start/end pattern regions
    rate_profile: tuple[float, ...] | None = None  # per-clip rate multipliers, cycled

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(
            p if isinstance(p, PathSpec) else PathSpec(**p) for p in self.paths))
        object.__setattr__(self, "object_size", tuple(map(float, self.object_size)))
        if self.rate_profile is not None:
            object.__setattr__(self, "rate_profile", tuple(map(float, self.rate_profile)))
        if self.frame_w % CELL_SIZE or self.frame_h % CELL_SIZE:
            raise ValueError(f"frame dims must be multiples of {CELL_SIZE}")
        if self.object_rate < 0:
            raise ValueError("object_rate must be non-negative")
        if self.duration < 1 or self.clip_count < 0 or self.fps < 1:
            raise ValueError("duration, fps must be positive and clip_count non-negative")

    @property
    def cols(self) -> int:
        return self.frame_w // CELL_SIZE

    @property
    def rows(self) -> int:
        return self.frame_h // CELL_SIZE

    @property
    def full_size(self) -> WindowSize:
        return WindowSize(self.frame_w, self.frame_h)

    def patterns(self) -> list[SpatialPattern]:
        """One start/end square-region pattern per distinct path entry/exit pair."""
        out, seen = [], set()
        for path in self.paths:
            key = (path.waypoints[0], path.waypoints[-1])
            if key in seen:
                continue
            seen.add(key)
            out.append(SpatialPattern(
                f"p{len(out)}",
                self._square(*path.waypoints[0]),
                self._square(*path.waypoints[-1])))
        return out

    def _square(self, cx: float, cy: float) -> tuple[tuple[float, float], ...]:
        r = self.region_radius
        x0, x1 = max(0.0, cx - r), min(float(self.frame_w), cx + r)
        y0, y1 = max(0.0, cy - r), min(float(self.frame_h), cy + r)
        return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paths"] = [{"waypoints": [list(p) for p in path.waypoints], "speed": list(path.speed),
                       "category": path.category} for path in self.paths]
        d["object_size"] = list(self.object_size)
        if self.rate_profile is not None:
            d["rate_profile"] = list(self.rate_profile)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["paths"] = tuple(PathSpec(tuple(map(tuple, p["waypoints"])), tuple(p.get("speed", (4.0, 7.0))),
                                    p.get("category", "car")) for p in d.get("paths", ()))
        if "object_size" in d:
            d["object_size"] = tuple(d["object_size"])
        if d.get("rate_profile") is not None:
            d["rate_profile"] = tuple(d["rate_profile"])
        return cls(**d)


def default_scene_spec(**overrides) -> SceneSpec:
    """A small junction: two through lanes, two turns, one diagonal."""
    paths = (
        PathSpec(((0, 96), (640, 96))),
        PathSpec(((640, 256), (0, 256))),
        PathSpec(((0, 96), (416, 96), (416, 352)), speed=(3.5, 6.0)),
        PathSpec(((224, 352), (224, 256), (0, 256)), speed=(3.5, 6.0)),
        PathSpec(((640, 32), (352, 176), (640, 320)), speed=(3.0, 5.0), category="bus"),
    )
    base = dict(paths=paths)
    base.update(overrides)
    return SceneSpec(**base)


@dataclass
class Clip:
    id: str
    duration: int
    frame_w: int
    frame_h: int
    tracks: list[Track]
    counts: dict[str, int]

    @cached_property
    def frames(self) -> list[list[Detection]]:
        """Ground-truth boxes per frame, ordered by track id."""
        frames: list[list[Detection]] = [[] for _ in range(self.duration)]
        for t in sorted(self.tracks, key=lambda t: t.id):
            for d in t.detections:
                frames[d.frame].append(d)
        return frames

    @cached_property
    def frame_track_ids(self) -> list[list[int]]:
        ids: list[list[int]] = [[] for _ in range(self.duration)]
        for t in sorted(self.tracks, key=lambda t: t.id):
            for d in t.detections:
                ids[d.frame].append(t.id)
        return ids


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    split: str
    seed: int
    clips: list[Clip]
    patterns: list[SpatialPattern] = field(default_factory=list)

    @property
    def labels(self) -> dict[str, dict[str, int]]:
        return {c.id: dict(c.counts) for c in self.clips}

    def to_dict(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "version": 1,
            "split": self.split,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "patterns": [p.to_dict() for p in self.patterns],
            "clips": [{
                "id": c.id,
                "tracks": [t.to_dict() for t in c.tracks],
                "frames": c.frame_track_ids,
                "counts": c.counts,
            } for c in self.clips],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDataset":
        if d.get("format") != DATASET_FORMAT:
            raise ValueError("not a multiscope dataset file")
        spec = SceneSpec.from_dict(d["spec"])
        clips = []
        for c in d["clips"]:
            clip = Clip(c["id"], spec.duration, spec.frame_w, spec.frame_h,
                        [Track.from_dict(t) for t in c["tracks"]], dict(c["counts"]))
            if clip.frame_track_ids != c["frames"]:
                raise ValueError(f"clip {clip.id}: frame index does not match tracks")
            clips.append(clip)
        patterns = [SpatialPattern.from_dict(p) for p in d.get("patterns", [])]
        return cls(spec, d["split"], int(d["seed"]), clips, patterns)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def split_seed(seed: int, split: str) -> int:
    idx = SPLITS.index(split) if split in SPLITS else 3
    return int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])


def _generate_clip(spec: SceneSpec, patterns: list[SpatialPattern], seed: int, index: int) -> Clip:
    rng = np.random.default_rng([seed, index])
    rate = spec.object_rate
    if spec.rate_profile:
        rate *= spec.rate_profile[index % len(spec.rate_profile)]
    per_frame = rate / spec.fps
    last_spawn = {i: -10**9 for i in range(len(spec.paths))}
    tracks: list[Track] = []
    for f0 in range(spec.duration):
        for _ in range(rng.poisson(per_frame)):
            pi = int(rng.integers(len(spec.paths)))
            path = spec.paths[pi]
            speed = rng.uniform(*path.speed)
            w, h = rng.uniform(*spec.object_size, size=2)
            n_steps = int(math.floor(path.length / speed))
            # objects must finish inside the clip and keep a headway on their path
            if f0 + n_steps >= spec.duration or f0 - last_spawn[pi] < spec.min_headway:
                continue
            last_spawn[pi] = f0
            dets = []
            for k in range(n_steps + 1):
                x, y = path.point_at(k * speed)
                d = clipped_detection(f0 + k, x - w / 2, y - h / 2, x + w / 2, y + h / 2,
                                      spec.frame_w, spec.frame_h, 1.0, path.category)
                if d is not None:
                    dets.append(d)
            if dets:
                tracks.append(Track(len(tracks), path.category, tuple(dets)))
    counts = count_by_pattern(tracks, patterns)
    return Clip(f"c{index:03d}", spec.duration, spec.frame_w, spec.frame_h, tracks, counts)


def generate(spec: SceneSpec, split: str = "train", seed: int | None = None) -> SyntheticDataset:
    """Generate one split. Deterministic in ``(seed or spec.rng_seed, split)``."""
    if not spec.paths:
        raise ValueError("path_library is empty")
    base = spec.rng_seed if seed is None else seed
    s = split_seed(base, split)
    patterns = spec.patterns()
    clips = [_generate_clip(spec, patterns, s, i) for i in range(spec.clip_count)]
    return SyntheticDataset(spec, split, base, clips, patterns)


# --------------------------------------------------------------------------- costs

@dataclass(frozen=True)
class DetectorCost:
    fixed: float
    per_mpixel: float

    def __post_init__(self):
        if self.fixed <= 0 or self.per_mpixel <= 0:
            raise ValueError("detector costs must be positive")


@dataclass
class CostModel:
    """Simulated execution time, in abstract time units.

    Detector time for a window is ``fixed + per_mpixel * area``, where area is the
    window area after scaling to the detector input resolution. Entries in
    ``table`` (keyed ``(arch, w, h)`` at native scale) override the formula; an
    architecture absent from ``detectors`` can only be priced from ``table``.
    """

    detectors: dict[str, DetectorCost]
    proxies: dict[str, float]
    decode_fixed: float = 0.5
    decode_per_mpixel: float = 8.0
    track_per_frame: float = 0.05
    track_per_pair: float = 0.002
    refine_per_track: float = 0.05
    table: dict[tuple[str, int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        self.detectors = {k: v if isinstance(v, DetectorCost) else DetectorCost(*v)
                          for k, v in self.detectors.items()}
        if any(v <= 0 for v in self.proxies.values()) or any(v <= 0 for v in self.table.values()):
            raise ValueError("all costs must be positive")

    def detector_time(self, arch: str, w: float, h: float, sx: float = 1.0, sy: float = 1.0) -> float:
        if sx == 1.0 and sy == 1.0 and (arch, int(w), int(h)) in self.table:
            return self.table[(arch, int(w), int(h))]
        if arch not in self.detectors:
            raise MissingCostError(f"no cost for {arch} at {w}x{h}")
        c = self.detectors[arch]
        return c.fixed + c.per_mpixel * (w * sx) * (h * sy) / 1e6

    def proxy_time(self, proxy_id: str) -> float:
        if proxy_id not in self.proxies:
            raise MissingCostError(f"no cost for proxy {proxy_id}")
        return self.proxies[proxy_id]

    def decode_time(self, w: float, h: float) -> float:
        return self.decode_fixed + self.decode_per_mpixel * w * h / 1e6

    def to_dict(self) -> dict:
        return {
            "detectors": {k: [v.fixed, v.per_mpixel] for k, v in self.detectors.items()},
            "proxies": dict(self.proxies),
            "decode_fixed": self.decode_fixed,
            "decode_per_mpixel": self.decode_per_mpixel,
            "track_per_frame": self.track_per_frame,
            "track_per_pair": self.track_per_pair,
            "refine_per_track": self.refine_per_track,
            "table": [[a, w, h, t] for (a, w, h), t in sorted(self.table.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        d = dict(d)
        d["table"] = {(a, int(w), int(h)): float(t) for a, w, h, t in d.get("table", [])}
        return cls(**d)


# --------------------------------------------------------------------------- noise models

@dataclass(frozen=True)
class DetectorNoise:
    """Miss probability is ``miss_max * logistic((size50 - effective_size) / softness)``."""

    size50: float = 14.0
    softness: float = 3.0
    miss_max: float = 0.5
    jitter: float = 1.0  # px sd at native resolution
    fp_rate: float = 0.0  # expected false positives per full-frame pass

    def __post_init__(self):
        if not 0 <= self.miss_max <= 1 or self.jitter < 0 or self.fp_rate < 0 or self.softness <= 0:
            raise ValueError("invalid detector noise parameters")


@dataclass(frozen=True)
class ProxyModel:
    id: str
    resolution: WindowSize
    flip_rate: float = 0.0
    spread: float = 0.0

    def __post_init__(self):
        if not 0 <= self.flip_rate <= 1 or not 0 <= self.spread < 0.5:
            raise ValueError("flip_rate must be in [0,1] and spread in [0,0.5)")


@dataclass(frozen=True)
class SimulatedDetector:
    arch: str
    resolution: WindowSize
    frame_w: int
    frame_h: int
    noise: DetectorNoise = DetectorNoise()

    @property
    def scale(self) -> tuple[float, float]:
        return self.resolution.w / self.frame_w, self.resolution.h / self.frame_h

    def miss_rate(self, w: float, h: float) -> float:
        sx, sy = self.scale
        eff = math.sqrt(w * sx * h * sy)
        z = (self.noise.size50 - eff) / self.noise.softness
        return self.noise.miss_max / (1.0 + math.exp(-z)) if z > -50 else 0.0


@dataclass
class SimProfile:
    """Cost model together with the detector and proxy noise it is paired with."""

    cost: CostModel
    detector_noise: dict[str, DetectorNoise]
    proxies: list[ProxyModel]

    def proxy(self, proxy_id: str) -> ProxyModel:
        for p in self.proxies:
            if p.id == proxy_id:
                return p
        raise KeyError(f"unknown proxy {proxy_id}")

    def detector(self, arch: str, resolution: WindowSize, frame_w: int, frame_h: int) -> SimulatedDetector:
        return SimulatedDetector(arch, resolution, frame_w, frame_h, self.detector_noise[arch])

    def slowest_arch(self, frame_w: int, frame_h: int) -> str:
        return max(sorted(self.detector_noise),
                   key=lambda a: self.cost.detector_time(a, frame_w, frame_h))

    def noiseless(self) -> "SimProfile":
        quiet = {a: DetectorNoise(n.size50, n.softness, 0.0, 0.0, 0.0) for a, n in self.detector_noise.items()}
        return SimProfile(self.cost, quiet, [ProxyModel(p.id, p.resolution) for p in self.proxies])

    def to_dict(self) -> dict:
        return {
            "cost": self.cost.to_dict(),
            "detector_noise": {a: asdict(n) for a, n in self.detector_noise.items()},
            "proxies": [{"id": p.id, "resolution": str(p.resolution), "flip_rate": p.flip_rate,
                         "spread": p.spread} for p in self.proxies],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimProfile":
        return cls(CostModel.from_dict(d["cost"]),
                   {a: DetectorNoise(**n) for a, n in d["detector_noise"].items()},
                   [ProxyModel(p["id"], WindowSize.parse(p["resolution"]), p["flip_rate"], p["spread"])
                    for p in d["proxies"]])


def default_profile() -> SimProfile:
    cost = CostModel(
        detectors={"large": DetectorCost(1.0, 400.0), "small": DetectorCost(0.5, 150.0)},
        proxies={"p0": 0.4, "p1": 0.6, "p2": 0.9, "p3": 1.3, "p4": 1.9},
    )
    noise = {
        "large": DetectorNoise(size50=14.0, softness=3.0, miss_max=0.5, jitter=1.0, fp_rate=0.05),
        "small": DetectorNoise(size50=20.0, softness=3.5, miss_max=0.5, jitter=2.0, fp_rate=0.1),
    }
    proxies = [
        ProxyModel("p0", WindowSize(128, 64), 0.010, 0.35),
        ProxyModel("p1", WindowSize(192, 96), 0.006, 0.30),
        ProxyModel("p2", WindowSize(256, 128), 0.003, 0.25),
        ProxyModel("p3", WindowSize(320, 192), 0.0015, 0.2),
        ProxyModel("p4", WindowSize(416, 224), 0.0005, 0.15),
    ]
    return SimProfile(cost, noise, proxies)


# --------------------------------------------------------------------------- simulation ops

def detect(objects: Sequence[Detection], rects: Sequence[Rect], det: SimulatedDetector,
           cost: CostModel, rng: np.random.Generator,
           frame: int | None = None) -> tuple[list[Detection], float]:
    """Run the simulated detector inside ``rects``.

    Per-object noise is drawn for every ground-truth object before the coverage
    test, so two calls with equal seeds but different windows share their draws.
    """
    sx, sy = det.scale
    time = sum(cost.detector_time(det.arch, r.w, r.h, sx, sy) for r in rects)
    n = len(objects)
    u = rng.random(n)
    z = rng.standard_normal((n, 4))
    out = []
    jit = det.noise.jitter / max(min(sx, sy), 1e-9)
    for i, obj in enumerate(objects):
        if not any(r.contains_point(obj.x, obj.y) for r in rects):
            continue
        miss = det.miss_rate(obj.w, obj.h)
        if u[i] < miss:
            continue
        x, y = obj.x + jit * z[i, 0], obj.y + jit * z[i, 1]
        w, h = max(2.0, obj.w + 0.5 * jit * z[i, 2]), max(2.0, obj.h + 0.5 * jit * z[i, 3])
        d = clipped_detection(obj.frame, x - w / 2, y - h / 2, x + w / 2, y + h / 2,
                              det.frame_w, det.frame_h, 0.5 + 0.5 * (1.0 - miss), obj.category)
        if d is not None:
            out.append(d)
    if det.noise.fp_rate > 0 and rects:
        if frame is None:
            frame = objects[0].frame if objects else 0
        covered = sum(r.w * r.h for r in rects) / (det.frame_w * det.frame_h)
        for _ in range(rng.poisson(det.noise.fp_rate * min(1.0, covered))):
            r = rects[int(rng.integers(len(rects)))]
            s = rng.uniform(16, 48)
            x, y = rng.uniform(r.x, r.x + r.w), rng.uniform(r.y, r.y + r.h)
            d = clipped_detection(frame, x - s / 2, y - s / 2, x + s / 2, y + s / 2,
                                  det.frame_w, det.frame_h, float(rng.uniform(0.0, 0.6)), "object")
            if d is not None:
                out.append(d)
    return out, time


def proxy_scores(objects: Sequence[Detection], frame_w: int, frame_h: int, proxy: ProxyModel,
                 rng: np.random.Generator) -> FrameGrid:
    """True cell labels, flipped with probability ``flip_rate``, pulled ``spread`` toward 0.5."""
    cols, rows = frame_w // CELL_SIZE, frame_h // CELL_SIZE
    labels = cell_labels(objects, cols, rows)
    flips = rng.random((rows, cols)) < proxy.flip_rate
    e = proxy.spread * rng.random((rows, cols))
    noisy = np.where(flips, 1.0 - labels, labels)
    scores = np.where(noisy > 0.5, 1.0 - e, e)
    return FrameGrid(cols, rows, scores)


def frame_rng(seed: int, clip_index: int, frame: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, clip_index, frame, stream])
