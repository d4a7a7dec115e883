import numpy as np
import pytest
from hypothesis import settings

from multiscope.geometry import Detection, Track

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def straight_track(tid, x0, y0, vx, vy, n, w=20.0, h=20.0, start=0, step=1, category="car"):
    dets = tuple(Detection(start + k * step, x0 + vx * k * step, y0 + vy * k * step, w, h, 1.0, category)
                 for k in range(n))
    return Track(tid, category, dets)


def polyline_track(tid, points, speed, w=20.0, h=20.0, start=0, category="car"):
    """Track walking ``points`` at ``speed`` px/frame."""
    pts = np.asarray(points, dtype=float)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = int(cum[-1] // speed)
    s = np.arange(n + 1) * speed
    xs, ys = np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])
    return Track(tid, category, tuple(Detection(start + k, float(x), float(y), w, h, 1.0, category)
                                      for k, (x, y) in enumerate(zip(xs, ys))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and statement")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or (report.when == "call" and n not in _criteria):
        _criteria[n] = ("FAIL" if failed else "PASS", text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, text = _criteria[n]
        terminalreporter.write_line(f"{status} criterion {n:>2}: {text}")
