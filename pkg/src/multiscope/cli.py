"""Command-line driver. Every command works inside one directory tracked by ``manifest.json``.

Typical order: ``generate``, ``select-best``, ``train-scorer``, ``refine build``,
``plan sizes``, ``cache``, ``tune``, then ``pipeline`` / ``eval`` / ``query``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import WindowSize
from .metrics import count_accuracy, limit_query, save_labels, save_patterns
from .pipeline import Configuration, PipelineModels, load_tracks, run_dataset, save_tracks
from .refinement import TrackRefiner
from .scorer import LogisticMatchScorer, train_scorer
from .sim import (SPLITS, SceneSpec, SimProfile, SyntheticDataset, default_profile, default_scene_spec, frame_rng,
                  generate, proxy_scores)
from .tracker import gap_sequence, sample_training_examples
from .tuner import (DetectionCache, Evaluator, ProxyCache, build_detection_cache, build_proxy_cache, load_curve,
                    next_detection, next_proxy, next_tracking, resolution_ladder, save_curve, select_theta_best,
                    threshold_ladder, tune)
from .windows import WindowPlanner, load_sizes, plan_grid, save_sizes, window_costs

EXIT_OK = 0
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_UNKNOWN_CONFIG = 5


class MissingPrerequisite(Exception):
    pass


class UnknownConfig(Exception):
    pass


@dataclass
class RunManifest:
    seed: int = 0
    files: dict[str, str] = field(default_factory=dict)
    config_id: str | None = None

    @classmethod
    def load(cls, workdir: Path) -> "RunManifest":
        path = workdir / "manifest.json"
        if not path.exists():
            return cls()
        with open(path) as f:
            d = json.load(f)
        return cls(int(d.get("seed", 0)), dict(d.get("files", {})), d.get("config_id"))

    def save(self, workdir: Path) -> None:
        _write_json(workdir / "manifest.json", asdict(self))

    def path(self, workdir: Path, name: str, step: str) -> Path:
        """Path of a recorded file; raises naming the command that produces it."""
        rel = self.files.get(name)
        if rel is None or not (workdir / rel).exists():
            raise MissingPrerequisite(f"missing {name}: run `multiscope {step}` first")
        return workdir / rel


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _read_json(path: Path):
    with open(path) as f:
        return json.load(f)


# --------------------------------------------------------------------------- context

class Context:
    def __init__(self, args):
        self.workdir = Path(args.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest.load(self.workdir)
        self.seed = self.manifest.seed if args.seed is None else args.seed
        self.jobs = args.jobs or os.cpu_count() or 1

    def record(self, name: str, filename: str) -> Path:
        self.manifest.files[name] = filename
        self.manifest.save(self.workdir)
        return self.workdir / filename

    def need(self, name: str, step: str) -> Path:
        return self.manifest.path(self.workdir, name, step)

    def dataset(self, split: str) -> SyntheticDataset:
        return SyntheticDataset.load(self.need(f"dataset-{split}", "generate"))

    def profile(self) -> SimProfile:
        return SimProfile.from_dict(_read_json(self.need("profile", "generate")))

    def best(self) -> Configuration:
        return Configuration.from_dict(_read_json(self.need("best", "select-best"))["config"])

    def models(self, config: Configuration | None = None, **overrides) -> PipelineModels:
        """Models for running ``config``; loads only what it needs and names anything missing."""
        m = PipelineModels(self.profile(), seed=self.seed)
        wants_all = config is None
        if wants_all or config.proxy:
            if "window-sizes" in self.manifest.files or not wants_all:
                m.window_sizes = load_sizes(self.need("window-sizes", "plan sizes"))
        if wants_all or config.tracker == "learned":
            if "scorer" in self.manifest.files or not wants_all:
                m.scorer = LogisticMatchScorer.load(self.need("scorer", "train-scorer"))
        if wants_all or config.refine:
            if "refiner" in self.manifest.files or not wants_all:
                m.refiner = TrackRefiner.load(self.need("refiner", "refine build"))
        for k, v in overrides.items():
            setattr(m, k, v)
        return m

    def known_configs(self) -> dict[str, Configuration]:
        out: dict[str, Configuration] = {}
        if "best" in self.manifest.files and (self.workdir / self.manifest.files["best"]).exists():
            b = self.best()
            out[b.id] = b
        if "curve-json" in self.manifest.files and (self.workdir / self.manifest.files["curve-json"]).exists():
            for p in load_curve(self.workdir / self.manifest.files["curve-json"]):
                out[p.config.id] = p.config
        return out

    def resolve_config(self, text: str) -> Configuration:
        if text == "best":
            return self.best()
        path = Path(text)
        if path.suffix == ".json" and path.exists():
            return Configuration.from_dict(_read_json(path))
        known = self.known_configs()
        if text not in known:
            raise UnknownConfig(f"unknown configuration id {text!r}; known: {', '.join(sorted(known)) or 'none'}")
        return known[text]


# --------------------------------------------------------------------------- commands

def cmd_generate(ctx: Context, args) -> None:
    if args.spec:
        raw = _read_json(Path(args.spec))
        if not isinstance(raw, dict):
            raise ValueError("scene spec must be a JSON object")
        base = default_scene_spec().to_dict()
        base.update(raw)
        spec = SceneSpec.from_dict(base)
    else:
        spec = default_scene_spec()
    if args.clips is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "clip_count": args.clips})
    profile = SimProfile.from_dict(_read_json(Path(args.profile))) if args.profile else default_profile()
    if args.noiseless:
        profile = profile.noiseless()
    ctx.manifest.seed = ctx.seed
    _write_json(ctx.record("scene", "scene.json"), spec.to_dict())
    _write_json(ctx.record("profile", "profile.json"), profile.to_dict())
    save_patterns(spec.patterns(), ctx.record("patterns", "patterns.json"))
    for split in args.split or SPLITS:
        ds = generate(spec, split, ctx.seed)
        ds.save(ctx.record(f"dataset-{split}", f"dataset-{split}.json"))
        save_labels(ds.labels, ctx.record(f"labels-{split}", f"labels-{split}.json"))
        print(f"{split}: {len(ds.clips)} clips, {sum(len(c.tracks) for c in ds.clips)} objects")


def cmd_select_best(ctx: Context, args) -> None:
    val = ctx.dataset("val")
    profile = ctx.profile()
    W, H = val.spec.frame_w, val.spec.frame_h
    ladder = resolution_ladder(W, H)
    ev = Evaluator(val, PipelineModels(profile, seed=ctx.seed), ctx.jobs)
    start = Configuration(args.arch or profile.slowest_arch(W, H), ladder[0])
    best, acc, log = select_theta_best(lambda c: ev(c).accuracy, start, ladder, gap_sequence(args.max_gap))
    _write_json(ctx.record("best", "best.json"), {
        "config": best.to_dict(), "id": best.id, "accuracy": acc, "runtime": ev(best).runtime,
        "log": [[k, a] for k, a in log], "trials": ev.trials})
    print(f"best {best.id} {best.key()} accuracy={acc:.4f}")


def _reference(ctx: Context, split: str, keep_detections: bool = False):
    ds = ctx.dataset(split)
    best = ctx.best()
    run = run_dataset(ds, best, PipelineModels(ctx.profile(), seed=ctx.seed), keep_detections, ctx.jobs)
    return ds, best, run


def cmd_train_scorer(ctx: Context, args) -> None:
    train, best, run = _reference(ctx, "train")
    save_tracks(run.tracks, ctx.record("reference-tracks", "reference-tracks.json"), run.runtime, best)
    groups = [run.tracks[c.id] for c in train.clips]
    examples = sample_training_examples(groups, gap_sequence(args.max_gap), args.examples,
                                        np.random.default_rng(ctx.seed))
    scorer = train_scorer(examples, (train.spec.frame_w, train.spec.frame_h), seed=ctx.seed)
    scorer.save(ctx.record("scorer", "scorer.json"))
    print(f"scorer trained on {len(examples)} examples, held-out accuracy {scorer.holdout_accuracy_:.4f}")


def cmd_refine(ctx: Context, args) -> None:
    if args.action == "build":
        tracks = load_tracks(ctx.need("reference-tracks", "train-scorer"))
        scene = SceneSpec.from_dict(_read_json(ctx.need("scene", "generate")))
        refiner = TrackRefiner(eps=args.eps, min_pts=args.min_pts, k=args.k,
                               frame_size=(scene.frame_w, scene.frame_h), clip_length=scene.duration)
        refiner.fit([t for cid in sorted(tracks) for t in tracks[cid]])
        refiner.save(ctx.record("refiner", "refiner.json"))
        print(f"{len(refiner.clusters_)} clusters")
    else:
        refiner = TrackRefiner.load(ctx.need("refiner", "refine build"))
        d = refiner.to_dict()
        out = {"clusters": [{"id": i, "members": c["members"], "start": c["center"][0], "end": c["center"][-1]}
                            for i, c in enumerate(d["clusters"])],
               "index": d["index"], "params": d["params"]}
        _emit(out, args.out)


def cmd_plan(ctx: Context, args) -> None:
    if args.action == "sizes":
        train, best, run = _reference(ctx, "train", keep_detections=True)
        frames = [dets for c in train.clips for _, dets in sorted(run.detections[c.id].items())]
        planner = WindowPlanner(train.spec.frame_w, train.spec.frame_h, ctx.profile().cost, best.arch,
                                best.resolution, k=args.k, max_frames=args.max_frames).fit(frames)
        save_sizes(planner.sizes_, ctx.record("window-sizes", "window-sizes.json"),
                   tot_time_history=planner.tot_time_history_)
        print("sizes " + " ".join(map(str, planner.sizes_)))
    else:
        config = ctx.resolve_config(args.config) if args.config else ctx.best()
        if not config.proxy:
            raise ValueError("plan dump needs a configuration with the proxy enabled")
        ds = ctx.dataset(args.split)
        models = ctx.models(config)
        clip_index = next((i for i, c in enumerate(ds.clips) if c.id == args.clip), None)
        if clip_index is None:
            raise ValueError(f"no clip {args.clip!r} in split {args.split}")
        clip = ds.clips[clip_index]
        W, H = clip.frame_w, clip.frame_h
        sizes = sorted(set(models.window_sizes) | {WindowSize(W, H)})
        costs = window_costs(models.profile.cost, config.arch, sizes, config.resolution, W, H)
        proxy = models.profile.proxy(config.proxy_id)
        frames = range(0, clip.duration, config.gap) if args.frame is None else [args.frame]
        out = {"config": config.id, "clip": clip.id, "sizes": [str(s) for s in sizes], "frames": []}
        for f in frames:
            grid = proxy_scores(clip.frames[f], W, H, proxy, frame_rng(models.seed, clip_index, f, 1))
            plan = plan_grid(grid, config.b_proxy, sizes, costs, W, H)
            out["frames"].append({"frame": f, **plan.to_dict()})
        _emit(out, args.out)


def _tuning_context(ctx: Context):
    val = ctx.dataset("val")
    models = ctx.models()
    for name, attr, step in (("window-sizes", "window_sizes", "plan sizes"), ("scorer", "scorer", "train-scorer"),
                             ("refiner", "refiner", "refine build")):
        if getattr(models, attr) is None:
            ctx.need(name, step)
    return val, models, Evaluator(val, models, ctx.jobs)


def cmd_cache(ctx: Context, args) -> None:
    val, models, ev = _tuning_context(ctx)
    best = ctx.best()
    ladder = resolution_ladder(val.spec.frame_w, val.spec.frame_h)
    det = build_detection_cache(ev, best, sorted(models.profile.detector_noise), ladder)
    ref = ev(best, keep_detections=True).run
    prox = build_proxy_cache(val, ref.detections, best, models, threshold_ladder(args.thresholds),
                             args.max_frames)
    _write_json(ctx.record("cache", "cache.json"),
                {"detection": det.to_dict(), "proxy": prox.to_dict(), "trials": ev.trials})
    print(f"cached {len(det.entries)} detector settings and {len(prox.table)} proxy settings")


def cmd_tune(ctx: Context, args) -> None:
    val, models, ev = _tuning_context(ctx)
    cache = _read_json(ctx.need("cache", "cache"))
    det, prox = DetectionCache.from_dict(cache["detection"]), ProxyCache.from_dict(cache["proxy"])
    start = ctx.best().with_(tracker="learned", refine=True)
    propose = {
        "detection": lambda c: next_detection(c, args.speedup, det),
        "proxy": lambda c: next_proxy(c, args.speedup, prox),
        "tracking": lambda c: next_tracking(c, args.speedup, args.max_gap),
    }
    curve = tune(start, ev, propose, args.speedup, args.max_iters)
    save_curve(curve, ctx.record("curve-csv", "curve.csv"), ctx.record("curve-json", "curve.json"))
    for p in curve:
        print(f"{p.config.id} runtime={p.runtime:.1f} accuracy={p.accuracy:.4f} {p.module}")
    print(f"{ev.trials} pipeline evaluations")


def cmd_pipeline(ctx: Context, args) -> None:
    config = ctx.resolve_config(args.config)
    ds = ctx.dataset(args.split)
    run = run_dataset(ds, config, ctx.models(config), n_jobs=ctx.jobs)
    out = Path(args.out) if args.out else ctx.workdir / f"tracks-{args.split}-{config.id}.json"
    save_tracks(run.tracks, out, run.runtime, config)
    ctx.manifest.config_id = config.id
    ctx.manifest.save(ctx.workdir)
    report = {"config": config.id, "split": args.split, "tracks": str(out), "runtime": run.runtime}
    _emit(report, None)


def cmd_eval(ctx: Context, args) -> None:
    ds = ctx.dataset(args.split)
    if args.curve:
        curve = load_curve(ctx.need("curve-json", "tune"))
        out = Path(args.out) if args.out else ctx.workdir / f"curve-{args.split}.csv"
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "config_id", "runtime", "accuracy", "val_accuracy"])
            for i, p in enumerate(curve):
                run = run_dataset(ds, p.config, ctx.models(p.config), n_jobs=ctx.jobs)
                acc = count_accuracy(run.tracks, ds.labels, ds.patterns)
                w.writerow([i, p.config.id, repr(run.runtime["total"]), repr(acc), repr(p.accuracy)])
        print(f"wrote {out}")
        return
    tracks = load_tracks(Path(args.tracks))
    acc = count_accuracy(tracks, ds.labels, ds.patterns)
    _emit({"split": args.split, "tracks": args.tracks, "accuracy": acc}, args.out)


def _parse_region(text: str) -> list[tuple[float, float]]:
    try:
        pts = [tuple(float(v) for v in p.split(",")) for p in text.split(";") if p.strip()]
    except ValueError:
        raise ValueError(f"bad region {text!r}; expected 'x,y;x,y;x,y'") from None
    if len(pts) < 3 or any(len(p) != 2 for p in pts):
        raise ValueError("region needs at least three x,y vertices")
    return pts


def cmd_query(ctx: Context, args) -> None:
    tracks = load_tracks(Path(args.tracks))
    region = _parse_region(args.region)
    clips = [args.clip] if args.clip else sorted(tracks)
    result = {}
    for cid in clips:
        if cid not in tracks:
            raise ValueError(f"no clip {cid!r} in {args.tracks}")
        result[cid] = limit_query(tracks[cid], region, args.min_count, args.spacing, args.limit)
    _emit({"region": [list(p) for p in region], "min_count": args.min_count, "spacing": args.spacing,
           "limit": args.limit, "frames": result}, args.out)


def _emit(obj, out) -> None:
    if out:
        _write_json(Path(out), obj)
    else:
        json.dump(obj, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="directory holding manifest.json and artifacts")
    common.add_argument("--seed", type=int, default=None, help="defaults to the seed recorded by generate")
    common.add_argument("--jobs", type=int, default=None, help="parallel clip workers (default: all cores)")

    p = argparse.ArgumentParser(prog="multiscope", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic train/val/test splits")
    g.add_argument("--spec", help="scene spec JSON; keys override the default scene")
    g.add_argument("--profile", help="simulator profile JSON (costs, detector and proxy noise)")
    g.add_argument("--noiseless", action="store_true", help="zero detector and proxy noise")
    g.add_argument("--clips", type=int, help="clips per split")
    g.add_argument("--split", action="append", choices=SPLITS)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("select-best", parents=[common], help="best-accuracy configuration search on val")
    s.add_argument("--arch")
    s.add_argument("--max-gap", type=int, default=32)
    s.set_defaults(func=cmd_select_best)

    t = sub.add_parser("train-scorer", parents=[common], help="train the match scorer on reference tracks")
    t.add_argument("--examples", type=int, default=4000)
    t.add_argument("--max-gap", type=int, default=32)
    t.set_defaults(func=cmd_train_scorer)

    r = sub.add_parser("refine", parents=[common], help="build or inspect the refinement clusters")
    r.add_argument("action", choices=("build", "inspect"))
    r.add_argument("--eps", type=float, default=None, help="pixels; default 5%% of the frame diagonal")
    r.add_argument("--min-pts", type=int, default=2)
    r.add_argument("-k", type=int, default=10)
    r.add_argument("--out")
    r.set_defaults(func=cmd_refine)

    pl = sub.add_parser("plan", parents=[common], help="select window sizes or dump per-frame plans")
    pl.add_argument("action", choices=("sizes", "dump"))
    pl.add_argument("-k", type=int, default=3)
    pl.add_argument("--max-frames", type=int, default=400)
    pl.add_argument("--config")
    pl.add_argument("--split", default="val", choices=SPLITS)
    pl.add_argument("--clip", default="c000")
    pl.add_argument("--frame", type=int)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plan)

    c = sub.add_parser("cache", parents=[common], help="caching phase on val")
    c.add_argument("--thresholds", type=int, default=20)
    c.add_argument("--max-frames", type=int, default=1000, help="frames sampled for the proxy cache")
    c.set_defaults(func=cmd_cache)

    tu = sub.add_parser("tune", parents=[common], help="greedy speed/accuracy curve on val")
    tu.add_argument("--speedup", type=float, default=0.3)
    tu.add_argument("--max-iters", type=int, default=10)
    tu.add_argument("--max-gap", type=int, default=32)
    tu.set_defaults(func=cmd_tune)

    pp = sub.add_parser("pipeline", parents=[common], help="run one configuration and write tracks")
    pp.add_argument("--config", default="best", help="'best', a configuration id, or a config JSON file")
    pp.add_argument("--split", default="test", choices=SPLITS)
    pp.add_argument("--out")
    pp.set_defaults(func=cmd_pipeline)

    e = sub.add_parser("eval", parents=[common], help="count accuracy of tracks, or of every curve point")
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--tracks")
    e.add_argument("--curve", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("query", parents=[common], help="queries over extracted tracks")
    q.add_argument("kind", choices=("limit",))
    q.add_argument("--tracks", required=True)
    q.add_argument("--region", required=True, help="polygon 'x,y;x,y;x,y'")
    q.add_argument("--clip")
    q.add_argument("--min-count", type=int, default=4)
    q.add_argument("--spacing", type=int, default=50, help="frames")
    q.add_argument("--limit", type=int, default=20)
    q.add_argument("--out")
    q.set_defaults(func=cmd_query)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and not args.curve and not args.tracks:
        print("error: eval needs --tracks or --curve", file=sys.stderr)
        return EXIT_INVALID
    try:
        args.func(Context(args), args)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return EXIT_MISSING
    except UnknownConfig as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNKNOWN_CONFIG
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
