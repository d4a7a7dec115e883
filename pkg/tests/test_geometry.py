import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from multiscope.geometry import (CELL_SIZE, Detection, Rect, Track, UnrefinableTrackError, WindowSize,
                                 cells_intersecting, clipped_detection, iou, iou_matrix, point_in_polygon,
                                 resample_path)

coord = st.floats(0, 600, allow_nan=False)
extent = st.floats(1, 200, allow_nan=False)
boxes = st.builds(lambda x, y, w, h: Detection(0, x, y, w, h), coord, coord, extent, extent)


def test_iou_identical_and_disjoint():
    a = Detection(0, 10, 10, 4, 4)
    assert iou(a, a) == 1.0
    assert iou(a, Detection(0, 100, 100, 4, 4)) == 0.0


def test_iou_corner_overlap_hand_value():
    # corner boxes (0,0,2,2) and (1,1,2,2): overlap 1, union 4 + 4 - 1
    a = Detection(0, 1, 1, 2, 2)
    b = Detection(0, 2, 2, 2, 2)
    assert iou(a, b) == pytest.approx(1 / 7)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))
    assert iou_matrix([(a.x, a.y, a.w, a.h)], [(b.x, b.y, b.w, b.h)])[0, 0] == pytest.approx(v)


def test_detection_rejects_bad_values():
    with pytest.raises(ValueError):
        Detection(0, 0, 0, 0, 5)
    with pytest.raises(ValueError):
        Detection(0, 0, 0, 5, 5, confidence=1.5)


def test_clipped_detection_stays_inside_frame():
    d = clipped_detection(3, -10, -10, 20, 20, 64, 64)
    x0, y0, x1, y1 = d.corners()
    assert (x0, y0, x1, y1) == (0, 0, 20, 20)
    assert clipped_detection(0, -30, -30, -5, -5, 64, 64) is None


def test_track_requires_increasing_frames():
    a, b = Detection(1, 0, 0, 2, 2), Detection(1, 1, 1, 2, 2)
    with pytest.raises(ValueError):
        Track(0, "car", (a, b))
    with pytest.raises(ValueError):
        Track(0, "car", ())


def test_resample_straight_segment():
    pts = resample_path([(0, 0), (10, 0)], 3)
    np.testing.assert_allclose(pts, [(0, 0), (5, 0), (10, 0)])


def test_resample_two_points_gives_endpoints():
    path = [(3, 4), (7, 1), (9, 9)]
    np.testing.assert_allclose(resample_path(path, 2), [(3, 4), (9, 9)])


def test_resample_right_angle_arc_lengths():
    # arc lengths 0, 2, 4, 6, 8 along (0,0)->(4,0)->(4,4)
    pts = resample_path([(0, 0), (4, 0), (4, 4)], 5)
    np.testing.assert_allclose(pts, [(0, 0), (2, 0), (4, 0), (4, 2), (4, 4)], atol=1e-12)


def test_resample_single_point_is_unrefinable():
    with pytest.raises(UnrefinableTrackError):
        resample_path([(1, 1)], 5)


def walk(points, n):
    """Points at evenly spaced arc lengths, found by stepping segment by segment."""
    pts = [np.asarray(p, dtype=float) for p in points]
    lengths = [math.dist(a, b) for a, b in zip(pts, pts[1:])]
    total = sum(lengths)
    out = []
    for k in range(n):
        s = total * k / (n - 1)
        i = 0
        while i < len(lengths) - 1 and s > lengths[i]:
            s -= lengths[i]
            i += 1
        t = 0.0 if lengths[i] == 0 else min(1.0, s / lengths[i])
        out.append(pts[i] + t * (pts[i + 1] - pts[i]))
    return np.array(out)


@given(st.lists(st.tuples(st.floats(0, 500), st.floats(0, 500)), min_size=2, max_size=12),
       st.integers(2, 40))
def test_resample_matches_arc_walk(points, n):
    pts = np.array(points)
    if np.hypot(*np.diff(pts, axis=0).T).sum() < 1e-3:
        return
    out = resample_path(pts, n)
    assert len(out) == n
    np.testing.assert_allclose(out, walk(points, n), atol=1e-6)
    gaps = np.hypot(*np.diff(out, axis=0).T)
    if len(pts) == 2:
        np.testing.assert_allclose(gaps, gaps[0], rtol=1e-6, atol=1e-9)


def brute_cells(box, cols, rows):
    x0, y0, x1, y1 = box.corners()
    out = set()
    for c in range(cols):
        for r in range(rows):
            ow = min(x1, (c + 1) * CELL_SIZE) - max(x0, c * CELL_SIZE)
            oh = min(y1, (r + 1) * CELL_SIZE) - max(y0, r * CELL_SIZE)
            if ow > 0 and oh > 0:
                out.add((c, r))
    return out


def test_cells_single_and_whole_frame():
    assert cells_intersecting(Detection(0, 16, 16, 10, 10), 4, 4) == {(0, 0)}
    assert cells_intersecting(Detection(0, 64, 64, 128, 128), 4, 4) == {(c, r) for c in range(4) for r in range(4)}


def test_cells_hand_case():
    # 40x40 centred at (48, 48) spans pixels 28..68, so columns/rows 0, 1, 2
    box = Detection(0, 48, 48, 40, 40)
    assert cells_intersecting(box, 4, 4) == brute_cells(box, 4, 4) == {(c, r) for c in range(3) for r in range(3)}


def test_cells_edge_contact_excluded():
    # box spans exactly [32, 64): touches cell 2 only at its edge
    assert cells_intersecting(Detection(0, 48, 48, 32, 32), 4, 4) == {(1, 1)}


@given(boxes)
def test_cells_match_brute_force(box):
    assert cells_intersecting(box, 20, 11) == brute_cells(box, 20, 11)


def test_window_size_validation_and_parse():
    assert WindowSize.parse("64x32") == WindowSize(64, 32)
    assert str(WindowSize(96, 64)) == "96x64"
    with pytest.raises(ValueError):
        WindowSize(40, 32)


def test_rect_contains_point_half_open():
    r = Rect(0, 0, 32, 32)
    assert r.contains_point(0, 0) and r.contains_point(31.9, 31.9)
    assert not r.contains_point(32, 0)


def test_point_in_polygon_boundary_counts_inside():
    sq = [(0, 0), (10, 0), (10, 10), (0, 10)]
    assert point_in_polygon(5, 5, sq)
    assert point_in_polygon(10, 5, sq)
    assert point_in_polygon(0, 0, sq)
    assert not point_in_polygon(10.01, 5, sq)
    assert not point_in_polygon(-1, -1, sq)
