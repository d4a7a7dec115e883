import pytest

from multiscope.geometry import WindowSize
from multiscope.metrics import count_accuracy
from multiscope.pipeline import STAGES, Configuration, PipelineModels, load_tracks, run_dataset, save_tracks
from multiscope.sim import default_profile, default_scene_spec, generate

FULL = WindowSize(640, 352)


@pytest.fixture(scope="module")
def data():
    return generate(default_scene_spec(clip_count=3, duration=150), "test", 2)


def test_configuration_validation_and_identity():
    with pytest.raises(ValueError):
        Configuration("large", FULL, gap=3)
    with pytest.raises(ValueError):
        Configuration("large", FULL, proxy=True)
    with pytest.raises(ValueError):
        Configuration("large", FULL, tracker="rnn")
    c = Configuration("large", FULL, proxy=True, proxy_id="p1", b_proxy=0.25, gap=4)
    assert Configuration.from_dict(c.to_dict()) == c
    assert c.id == Configuration.from_dict(c.to_dict()).id and c.id != c.with_(gap=8).id


def test_noiseless_full_rate_is_exact(data):
    run = run_dataset(data, Configuration("large", FULL), PipelineModels(default_profile().noiseless()))
    assert count_accuracy(run.tracks, data.labels, data.patterns) == 1.0


def test_runtime_breakdown_sums_to_total(data):
    models = PipelineModels(default_profile(), window_sizes=[WindowSize(96, 64), WindowSize(192, 128)])
    run = run_dataset(data, Configuration("small", WindowSize(448, 256), proxy=True, proxy_id="p2", gap=2), models)
    assert abs(sum(run.runtime[s] for s in STAGES) - run.runtime["total"]) <= 1e-9
    assert run.runtime["proxy"] > 0 and run.runtime["detect"] > 0


def test_full_cover_proxy_matches_no_proxy(data):
    models = PipelineModels(default_profile(), window_sizes=[WindowSize(96, 64)])
    base = Configuration("large", FULL)
    plain = run_dataset(data, base, models, keep_detections=True)
    # every proxy score is strictly positive, so threshold 0 selects every cell
    covered = run_dataset(data, base.with_(proxy=True, proxy_id="p0", b_proxy=0.0), models, keep_detections=True)
    assert covered.detections == plain.detections
    assert covered.runtime["total"] != plain.runtime["total"]


def test_jobs_do_not_change_results(data):
    models = PipelineModels(default_profile())
    c = Configuration("large", WindowSize(544, 288), gap=2)
    assert run_dataset(data, c, models, n_jobs=1).tracks == run_dataset(data, c, models, n_jobs=2).tracks


def test_missing_models_rejected(data):
    with pytest.raises(ValueError):
        run_dataset(data, Configuration("large", FULL, tracker="learned"), PipelineModels(default_profile()))
    with pytest.raises(ValueError):
        run_dataset(data, Configuration("large", FULL, proxy=True, proxy_id="p0"), PipelineModels(default_profile()))


def test_tracks_file_round_trip(tmp_path, data):
    run = run_dataset(data, Configuration("large", FULL), PipelineModels(default_profile()))
    save_tracks(run.tracks, tmp_path / "t.json", run.runtime)
    assert load_tracks(tmp_path / "t.json") == run.tracks
