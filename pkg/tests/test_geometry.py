import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advperc.geometry import Polyline, arc_points, box_corners, box_separation, signed_separation, wrap_angle


def _boundary(corners, n=100):
    pts = []
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        u = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
        pts.append(a + u * (b - a))
    return np.vstack(pts)


def _penetration_oracle(ca, cb, n_dirs=3600):
    # minimum translation distance: smallest overlap over many directions
    th = np.linspace(0.0, math.pi, n_dirs, endpoint=False)
    axes = np.stack([np.cos(th), np.sin(th)])
    pa, pb = ca @ axes, cb @ axes
    return float((np.minimum(pa.max(0), pb.max(0)) - np.maximum(pa.min(0), pb.min(0))).min())


boxes = st.tuples(
    st.floats(-10, 10), st.floats(-10, 10), st.floats(-math.pi, math.pi),
    st.floats(0.5, 6.0), st.floats(0.5, 3.0),
)


def test_wrap_angle_range():
    vals = wrap_angle(np.array([-math.pi, math.pi, 3 * math.pi, -3.5 * math.pi, 0.0]))
    assert np.all(vals > -math.pi) and np.all(vals <= math.pi)
    assert vals[0] == pytest.approx(math.pi)
    assert wrap_angle(2 * math.pi + 0.1) == pytest.approx(0.1)


def test_separated_boxes_distance():
    assert box_separation((0, 0), 0.0, (4, 2), (10, 0), 0.0, (4, 2)) == pytest.approx(6.0)
    assert box_separation((0, 0), 0.0, (4, 2), (0, 5), 0.0, (4, 2)) == pytest.approx(3.0)


def test_overlapping_boxes_penetration():
    assert box_separation((0, 0), 0.0, (4, 2), (3, 0), 0.0, (4, 2)) == pytest.approx(-1.0)
    assert box_separation((0, 0), 0.0, (4, 2), (0, 0), 0.0, (4, 2)) == pytest.approx(-2.0)


def test_touching_boxes_zero():
    assert box_separation((0, 0), 0.0, (4, 2), (4, 0), 0.0, (4, 2)) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_signed_separation_matches_oracles(a, b):
    ca = box_corners(a[:2], a[2], a[3], a[4])
    cb = box_corners(b[:2], b[2], b[3], b[4])
    sep = signed_separation(ca, cb)
    assert sep == pytest.approx(signed_separation(cb, ca), abs=1e-9)
    if sep > 0:
        pa, pb = _boundary(ca), _boundary(cb)
        brute = np.min(np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2))
        assert brute >= sep - 1e-9
        assert brute <= sep + 0.05
    else:
        oracle = _penetration_oracle(ca, cb)
        # the direction grid can only miss the optimum, so the oracle is an upper bound
        assert oracle >= -sep - 1e-9
        assert oracle <= -sep + 1e-3 * (a[3] + a[4] + b[3] + b[4])


@settings(max_examples=100, deadline=None)
@given(boxes, boxes, st.floats(-50, 50), st.floats(-50, 50), st.floats(-math.pi, math.pi))
def test_separation_rigid_invariance(a, b, tx, ty, rot):
    def moved(box):
        c, s = math.cos(rot), math.sin(rot)
        x, y = box[0] * c - box[1] * s + tx, box[0] * s + box[1] * c + ty
        return box_corners((x, y), box[2] + rot, box[3], box[4])

    ca, cb = box_corners(a[:2], a[2], a[3], a[4]), box_corners(b[:2], b[2], b[3], b[4])
    assert signed_separation(moved(a), moved(b)) == pytest.approx(signed_separation(ca, cb), abs=1e-7)


def test_box_corners_counter_clockwise():
    c = box_corners((1.0, 2.0), 0.3, 4.0, 2.0)
    area = 0.5 * sum(c[k, 0] * c[(k + 1) % 4, 1] - c[(k + 1) % 4, 0] * c[k, 1] for k in range(4))
    assert area == pytest.approx(8.0)
    assert c.mean(axis=0) == pytest.approx([1.0, 2.0])


def test_polyline_eval_and_project():
    line = Polyline([(0, 0), (10, 0), (10, 10)])
    assert line.length == pytest.approx(20.0)
    assert line.point_at(15.0) == pytest.approx([10.0, 5.0])
    assert line.heading_at(15.0) == pytest.approx(math.pi / 2)
    s, lat = line.project((12.0, 4.0))
    assert s == pytest.approx(14.0) and lat == pytest.approx(-2.0)
    s, lat = line.project((-5.0, 1.0))  # before the start: first segment extends
    assert s == pytest.approx(-5.0) and lat == pytest.approx(1.0)
    assert line.point_at(25.0) == pytest.approx([10.0, 15.0])


def test_polyline_rejects_degenerate():
    with pytest.raises(ValueError):
        Polyline([(0, 0)])
    with pytest.raises(ValueError):
        Polyline([(1, 1), (1, 1)])


def test_arc_points_radius():
    pts = arc_points((0.0, 0.0), 5.0, 0.0, 90.0)
    assert np.linalg.norm(pts, axis=1) == pytest.approx(np.full(len(pts), 5.0))
    assert pts[0] == pytest.approx([5.0, 0.0]) and pts[-1] == pytest.approx([0.0, 5.0], abs=1e-12)
