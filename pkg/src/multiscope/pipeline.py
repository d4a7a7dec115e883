"""End-to-end execution of one configuration over clips, with simulated per-stage runtimes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from joblib import Parallel, delayed

from .geometry import Detection, Rect, Track, WindowSize
from .sim import Clip, SimProfile, SyntheticDataset, detect, frame_rng, proxy_scores
from .tracker import OnlineTracker, SortScorer
from .windows import plan_grid, window_costs

STAGES = ("decode", "proxy", "detect", "track", "refine")
TRACKERS = ("sort", "learned")


@dataclass(frozen=True)
class Configuration:
    arch: str
    resolution: WindowSize
    conf_threshold: float = 0.5
    proxy: bool = False
    proxy_id: str = ""
    b_proxy: float = 0.5
    gap: int = 1
    tracker: str = "sort"
    refine: bool = False

    def __post_init__(self):
        if self.gap < 1 or self.gap & (self.gap - 1):
            raise ValueError(f"gap {self.gap} is not a power of two")
        if not 0 <= self.conf_threshold <= 1 or not 0 <= self.b_proxy <= 1:
            raise ValueError("thresholds must lie in [0, 1]")
        if self.tracker not in TRACKERS:
            raise ValueError(f"tracker must be one of {TRACKERS}")
        if self.proxy and not self.proxy_id:
            raise ValueError("proxy enabled without a proxy resolution")

    def key(self) -> str:
        proxy = f"{self.proxy_id}@{self.b_proxy:.3f}" if self.proxy else "noproxy"
        return (f"{self.arch}-{self.resolution}-c{self.conf_threshold:.2f}-{proxy}"
                f"-g{self.gap}-{self.tracker}{'-refine' if self.refine else ''}")

    @property
    def id(self) -> str:
        return hashlib.sha1(self.key().encode()).hexdigest()[:10]

    def with_(self, **changes) -> "Configuration":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = str(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Configuration":
        d = dict(d)
        d["resolution"] = WindowSize.parse(d["resolution"])
        return cls(**d)


@dataclass
class PipelineModels:
    """Everything a configuration needs besides its parameters."""

    profile: SimProfile
    window_sizes: list[WindowSize] | None = None
    scorer: object | None = None
    refiner: object | None = None
    sort_iou: float = 0.1
    patience: int = 2
    seed: int = 0


@dataclass
class ClipResult:
    clip_id: str
    tracks: list[Track]
    runtime: dict[str, float]
    detections: dict[int, list[Detection]] = field(default_factory=dict)


@dataclass
class RunResult:
    tracks: dict[str, list[Track]]
    runtime: dict[str, float]
    detections: dict[str, dict[int, list[Detection]]] = field(default_factory=dict)

    @property
    def total_time(self) -> float:
        return self.runtime["total"]


def run_clip(clip: Clip, clip_index: int, config: Configuration, models: PipelineModels,
             keep_detections: bool = False) -> ClipResult:
    profile = models.profile
    cost = profile.cost
    W, H = clip.frame_w, clip.frame_h
    detector = profile.detector(config.arch, config.resolution, W, H)
    sx, sy = detector.scale
    full = Rect(0, 0, W, H)
    if config.proxy:
        if not models.window_sizes:
            raise ValueError("proxy enabled but no window sizes were selected")
        proxy = profile.proxy(config.proxy_id)
        sizes = sorted(set(models.window_sizes) | {WindowSize(W, H)})
        costs = window_costs(cost, config.arch, sizes, config.resolution, W, H)
    if config.tracker == "learned":
        if models.scorer is None:
            raise ValueError("learned tracker requested but no scorer is trained")
        scorer = models.scorer
    else:
        scorer = SortScorer(models.sort_iou)
    tracker = OnlineTracker(scorer, patience=models.patience)
    rt = dict.fromkeys(STAGES, 0.0)
    kept: dict[int, list[Detection]] = {}
    for f in range(0, clip.duration, config.gap):
        objects = clip.frames[f]
        rt["decode"] += cost.decode_time(config.resolution.w, config.resolution.h)
        if config.proxy:
            grid = proxy_scores(objects, W, H, proxy, frame_rng(models.seed, clip_index, f, 1))
            rt["proxy"] += cost.proxy_time(proxy.id)
            rects = plan_grid(grid, config.b_proxy, sizes, costs, W, H).rects
        else:
            rects = [full]
        dets, t = detect(objects, rects, detector, cost, frame_rng(models.seed, clip_index, f, 0), frame=f)
        rt["detect"] += t
        dets = [d for d in dets if d.confidence >= config.conf_threshold]
        if keep_detections:
            kept[f] = dets
        before = tracker.pairs_scored
        tracker.update(f, dets)
        rt["track"] += cost.track_per_frame + cost.track_per_pair * (tracker.pairs_scored - before)
    tracks = tracker.finish()
    if config.refine and models.refiner is not None:
        refined = []
        for tr in tracks:
            new, _ = models.refiner.refine_one(tr)
            refined.append(new)
        rt["refine"] += cost.refine_per_track * len(tracks)
        tracks = refined
    rt["total"] = sum(rt[s] for s in STAGES)
    return ClipResult(clip.id, tracks, rt, kept)


def run_dataset(clips: SyntheticDataset | Sequence[Clip], config: Configuration, models: PipelineModels,
                keep_detections: bool = False, n_jobs: int = 1) -> RunResult:
    """Run ``config`` over every clip; results do not depend on ``n_jobs``."""
    clips = clips.clips if isinstance(clips, SyntheticDataset) else list(clips)
    if n_jobs == 1:
        results = [run_clip(c, i, config, models, keep_detections) for i, c in enumerate(clips)]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(run_clip)(c, i, config, models, keep_detections) for i, c in enumerate(clips))
    runtime = dict.fromkeys(STAGES + ("total",), 0.0)
    for r in results:
        for k, v in r.runtime.items():
            runtime[k] += v
    return RunResult({r.clip_id: r.tracks for r in results}, runtime,
                     {r.clip_id: r.detections for r in results} if keep_detections else {})


def save_tracks(tracks_by_clip: dict[str, list[Track]], path, runtime: dict | None = None,
                config: Configuration | None = None) -> None:
    doc = {"format": "multiscope.tracks", "version": 1,
           "config": config.to_dict() if config else None,
           "runtime": runtime,
           "clips": {cid: [t.to_dict() for t in tracks] for cid, tracks in tracks_by_clip.items()}}
    with open(path, "w") as f:
        json.dump(doc, f, separators=(",", ":"))


def load_tracks(path) -> dict[str, list[Track]]:
    with open(path) as f:
        doc = json.load(f)
    return {cid: [Track.from_dict(t) for t in tracks] for cid, tracks in doc["clips"].items()}
