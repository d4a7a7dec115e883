"""Best-accuracy configuration search, caching phase, and the greedy speed/accuracy tuner."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import WindowSize
from .metrics import count_accuracy
from .pipeline import Configuration, PipelineModels, RunResult, run_dataset
from .refinement import TrackRefiner
from .scorer import train_scorer
from .sim import SimProfile, SyntheticDataset, default_profile, frame_rng, proxy_scores
from .tracker import gap_sequence, sample_training_examples
from .windows import WindowPlanner, recall_runtime, window_costs

MODULES = ("detection", "proxy", "tracking")


def resolution_ladder(frame_w: int, frame_h: int, factor: float = 0.85, min_px: int = 64) -> list[WindowSize]:
    """Native resolution shrunk by ``factor`` per step and snapped to multiples of 32."""
    out: list[WindowSize] = []
    j = 0
    while True:
        w = int(round(frame_w * factor ** j / 32)) * 32
        h = int(round(frame_h * factor ** j / 32)) * 32
        if min(w, h) < min_px:
            return out
        s = WindowSize(w, h)
        if s not in out:
            out.append(s)
        j += 1


def threshold_ladder(n: int = 20) -> list[float]:
    return [float(b) for b in np.linspace(0.0, 1.0, n)]


@dataclass
class Evaluation:
    accuracy: float
    runtime: float
    detect_time: float
    run: RunResult = field(repr=False)


class Evaluator:
    """Runs configurations over one dataset, memoised by configuration key; counts real runs."""

    def __init__(self, dataset: SyntheticDataset, models: PipelineModels, n_jobs: int = 1):
        self.dataset = dataset
        self.models = models
        self.n_jobs = n_jobs
        self.trials = 0
        self._memo: dict[str, Evaluation] = {}

    def __call__(self, config: Configuration, keep_detections: bool = False) -> Evaluation:
        hit = self._memo.get(config.key())
        if hit is not None and (hit.run.detections or not keep_detections):
            return hit
        self.trials += 1
        run = run_dataset(self.dataset, config, self.models, keep_detections, self.n_jobs)
        acc = count_accuracy(run.tracks, self.dataset.labels, self.dataset.patterns)
        ev = Evaluation(acc, run.runtime["total"], run.runtime["detect"], run)
        self._memo[config.key()] = ev
        return ev


def select_theta_best(evaluate: Callable[[Configuration], float], start: Configuration,
                      ladder: Sequence[WindowSize], gaps: Sequence[int]) -> tuple[Configuration, float, list]:
    """Shrink resolution, then sampling rate, while accuracy does not decrease.

    Each search stops at the first step whose accuracy is lower than the previous
    step's; equal accuracy keeps going, so ties resolve toward the cheaper setting.
    Returns ``(config, accuracy, log)`` with ``log`` holding every evaluated step.
    """
    log = []
    best, best_acc = start, evaluate(start)
    log.append((start.key(), best_acc))
    for field_name, values in (("resolution", [r for r in ladder if r != start.resolution]),
                               ("gap", [g for g in gaps if g > start.gap])):
        prev = best_acc
        for v in values:
            cfg = best.with_(**{field_name: v})
            acc = evaluate(cfg)
            log.append((cfg.key(), acc))
            if acc < prev:
                break
            prev = acc
            best, best_acc = cfg, acc
    return best, best_acc, log


@dataclass
class DetectionCache:
    """Per ``(arch, resolution)``: detector time and validation accuracy."""

    entries: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"entries": [[a, r, t, acc] for (a, r), (t, acc) in sorted(self.entries.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionCache":
        return cls({(a, r): (t, acc) for a, r, t, acc in d["entries"]})


@dataclass
class ProxyCache:
    """Per ``(proxy id, threshold)``: recall of reference detections and estimated runtime."""

    table: dict[tuple[str, float], tuple[float, float]] = field(default_factory=dict)
    no_proxy_runtime: float = 0.0

    def to_dict(self) -> dict:
        return {"no_proxy_runtime": self.no_proxy_runtime,
                "table": [[p, b, rec, rt] for (p, b), (rec, rt) in sorted(self.table.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "ProxyCache":
        return cls({(p, float(b)): (rec, rt) for p, b, rec, rt in d["table"]}, d["no_proxy_runtime"])


def build_detection_cache(evaluate: Callable[[Configuration], Evaluation], base: Configuration,
                          archs: Sequence[str], ladder: Sequence[WindowSize]) -> DetectionCache:
    cache = DetectionCache()
    for a in archs:
        for r in ladder:
            ev = evaluate(base.with_(arch=a, resolution=r))
            cache.entries[(a, str(r))] = (ev.detect_time, ev.accuracy)
    return cache


def build_proxy_cache(dataset: SyntheticDataset, reference: dict[str, dict[int, list]], base: Configuration,
                      models: PipelineModels, thresholds: Sequence[float],
                      max_frames: int | None = None) -> ProxyCache:
    """Score every reference frame with each proxy once, then plan windows per threshold.

    ``reference`` holds the best-accuracy configuration's detections per clip and
    frame; those frames are the ones planned.
    """
    spec = dataset.spec
    W, H = spec.frame_w, spec.frame_h
    frames = [(ci, clip, f) for ci, clip in enumerate(dataset.clips) for f in sorted(reference[clip.id])]
    if max_frames and len(frames) > max_frames:
        idx = np.linspace(0, len(frames) - 1, max_frames).round().astype(int)
        frames = [frames[i] for i in idx]
    sizes = sorted(set(models.window_sizes) | {WindowSize(W, H)})
    costs = window_costs(models.profile.cost, base.arch, sizes, base.resolution, W, H)
    cache = ProxyCache(no_proxy_runtime=len(frames) * costs[WindowSize(W, H)])
    for proxy in models.profile.proxies:
        scored = [(proxy_scores(clip.frames[f], W, H, proxy, frame_rng(models.seed, ci, f, 1)),
                   reference[clip.id][f]) for ci, clip, f in frames]
        pt = models.profile.cost.proxy_time(proxy.id)
        memo: dict = {}
        for b in thresholds:
            cache.table[(proxy.id, b)] = recall_runtime(scored, b, sizes, costs, pt, W, H, memo)
    return cache


def next_detection(config: Configuration, speedup: float, cache: DetectionCache) -> Configuration | None:
    """Most accurate cached detector setting at least ``speedup`` faster; ties go to the faster one."""
    t_now, _ = cache.entries[(config.arch, str(config.resolution))]
    ok = [(acc, -t, a, r) for (a, r), (t, acc) in cache.entries.items() if t <= (1 - speedup) * t_now]
    if not ok:
        return None
    acc, _, a, r = max(ok, key=lambda e: (e[0], e[1], e[2], e[3]))
    return config.with_(arch=a, resolution=WindowSize.parse(r))


def next_proxy(config: Configuration, speedup: float, cache: ProxyCache) -> Configuration | None:
    """Highest-recall (proxy, threshold) whose estimated runtime is ``speedup`` below the current one."""
    now = cache.table[(config.proxy_id, config.b_proxy)][1] if config.proxy else cache.no_proxy_runtime
    ok = [(rec, -rt, p, b) for (p, b), (rec, rt) in cache.table.items() if rt <= (1 - speedup) * now]
    if not ok:
        return None
    rec, _, p, b = max(ok, key=lambda e: (e[0], e[1], e[2], -e[3]))
    return config.with_(proxy=True, proxy_id=p, b_proxy=b)


def next_tracking(config: Configuration, speedup: float, max_gap: int) -> Configuration | None:
    """Smallest power-of-two gap processing ``speedup`` fewer frames; None past ``max_gap``."""
    target = config.gap / (1 - speedup)
    g = 1 << max(0, math.ceil(math.log2(target) - 1e-12))
    if g > max_gap or g <= config.gap:
        return None
    return config.with_(gap=g)


@dataclass
class CurvePoint:
    config: Configuration
    accuracy: float
    runtime: float
    module: str = "start"

    def to_dict(self) -> dict:
        return {"id": self.config.id, "key": self.config.key(), "module": self.module,
                "accuracy": self.accuracy, "runtime": self.runtime, "config": self.config.to_dict()}


def tune(start: Configuration, evaluate: Callable[[Configuration], Evaluation],
         propose: dict[str, Callable[[Configuration], Configuration | None]], speedup: float = 0.3,
         max_iters: int = 10, slack: float = 0.1) -> list[CurvePoint]:
    """Greedy curve: each round every live module proposes one faster candidate, the most accurate wins.

    A module that has nothing faster to offer is retired. Candidates whose measured
    runtime is above ``(1 - speedup + slack)`` times the current runtime are
    skipped for that round.
    """
    ev = evaluate(start)
    curve = [CurvePoint(start, ev.accuracy, ev.runtime)]
    current = curve[0]
    live = [m for m in MODULES if m in propose]
    for _ in range(max_iters):
        cands = []
        for m in list(live):
            c = propose[m](current.config)
            if c is None:
                live.remove(m)
            else:
                cands.append((m, c))
        if not cands:
            break
        scored = []
        for m, c in cands:
            e = evaluate(c)
            if e.runtime <= (1 - speedup + slack) * current.runtime:
                scored.append(CurvePoint(c, e.accuracy, e.runtime, m))
        if not scored:
            break
        current = max(scored, key=lambda p: (p.accuracy, -p.runtime))
        curve.append(current)
    return curve


def save_curve(curve: Sequence[CurvePoint], csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "config_id", "runtime", "accuracy", "module", "key"])
        for i, p in enumerate(curve):
            w.writerow([i, p.config.id, repr(p.runtime), repr(p.accuracy), p.module, p.config.key()])
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump([p.to_dict() for p in curve], f, indent=1)


def load_curve(json_path) -> list[CurvePoint]:
    with open(json_path) as f:
        return [CurvePoint(Configuration.from_dict(p["config"]), p["accuracy"], p["runtime"], p["module"])
                for p in json.load(f)]


class MultiScopeTuner(BaseEstimator):
    """Fits every learned piece of the pipeline and the speed/accuracy curve.

    ``fit(train, val)`` runs, in order: best-accuracy configuration search on
    ``val``; that configuration over ``train`` to get reference tracks and
    detections; window-size selection, match-scorer training and refinement
    clustering on those references; the caching phase on ``val``; and the greedy
    tuner.
    """

    def __init__(self, speedup=0.3, max_iters=10, k=3, max_gap=32, n_thresholds=20, scorer_examples=4000,
                 profile=None, eps=None, seed=0, n_jobs=1, proxy_cache_frames=1000, window_frames=400):
        self.speedup = speedup
        self.max_iters = max_iters
        self.k = k
        self.max_gap = max_gap
        self.n_thresholds = n_thresholds
        self.scorer_examples = scorer_examples
        self.profile = profile
        self.eps = eps
        self.seed = seed
        self.n_jobs = n_jobs
        self.proxy_cache_frames = proxy_cache_frames
        self.window_frames = window_frames

    def fit(self, train: SyntheticDataset, val: SyntheticDataset):
        self.prepare(train, val)
        self.run_cache_phase(val)
        self.run_tuning()
        return self

    # the phases are public so the CLI can persist between them

    def prepare(self, train: SyntheticDataset, val: SyntheticDataset):
        profile: SimProfile = self.profile or default_profile()
        spec = val.spec
        W, H = spec.frame_w, spec.frame_h
        self.models_ = PipelineModels(profile, seed=self.seed)
        self.evaluator_ = Evaluator(val, self.models_, self.n_jobs)
        self.ladder_ = resolution_ladder(W, H)
        start = Configuration(profile.slowest_arch(W, H), self.ladder_[0])
        self.theta_best_, self.theta_best_accuracy_, self.theta_best_log_ = select_theta_best(
            lambda c: self.evaluator_(c).accuracy, start, self.ladder_, gap_sequence(self.max_gap))
        self.theta_best_runtime_ = self.evaluator_(self.theta_best_).runtime
        self.selection_trials_ = self.evaluator_.trials

        ref = run_dataset(train, self.theta_best_, self.models_, keep_detections=True, n_jobs=self.n_jobs)
        self.reference_tracks_ = ref.tracks
        frames = [dets for clip in train.clips for _, dets in sorted(ref.detections[clip.id].items())]
        planner = WindowPlanner(W, H, profile.cost, self.theta_best_.arch, self.theta_best_.resolution,
                                k=self.k, max_frames=self.window_frames).fit(frames)
        self.window_sizes_ = planner.sizes_

        rng = np.random.default_rng(self.seed)
        groups = [ref.tracks[c.id] for c in train.clips]
        examples = sample_training_examples(groups, gap_sequence(self.max_gap), self.scorer_examples, rng)
        self.scorer_ = train_scorer(examples, (W, H), seed=self.seed)
        self.refiner_ = TrackRefiner(eps=self.eps, frame_size=(W, H), clip_length=spec.duration).fit(
            [t for g in groups for t in g])
        self.models_.window_sizes = self.window_sizes_
        self.models_.scorer = self.scorer_
        self.models_.refiner = self.refiner_
        return self

    def run_cache_phase(self, val: SyntheticDataset):
        check_is_fitted(self, "theta_best_")
        before = self.evaluator_.trials
        self.detection_cache_ = build_detection_cache(
            self.evaluator_, self.theta_best_, sorted(self.models_.profile.detector_noise), self.ladder_)
        best_run = self.evaluator_(self.theta_best_, keep_detections=True).run
        self.proxy_cache_ = build_proxy_cache(val, best_run.detections, self.theta_best_, self.models_,
                                              threshold_ladder(self.n_thresholds), self.proxy_cache_frames)
        self.cache_trials_ = self.evaluator_.trials - before
        return self

    def proposers(self) -> dict[str, Callable[[Configuration], Configuration | None]]:
        return {
            "detection": lambda c: next_detection(c, self.speedup, self.detection_cache_),
            "proxy": lambda c: next_proxy(c, self.speedup, self.proxy_cache_),
            "tracking": lambda c: next_tracking(c, self.speedup, self.max_gap),
        }

    def run_tuning(self):
        check_is_fitted(self, "detection_cache_")
        before = self.evaluator_.trials
        start = self.theta_best_.with_(tracker="learned", refine=True)
        self.curve_ = tune(start, self.evaluator_, self.proposers(), self.speedup, self.max_iters)
        self.tuning_trials_ = self.evaluator_.trials - before
        return self
