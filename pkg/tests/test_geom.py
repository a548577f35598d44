import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roigraph.geom import (Box3D, PointCloud, box_corners, box_frames, clip_convex, bev_polygon, diagonal_corners,
                           from_canonical, iou_3d, iou_bev, point_in_box, to_canonical, wrap_angle)

UNIT = Box3D(0, 0, 0, 1, 1, 1, 0)

finite = st.floats(-50, 50, allow_nan=False)
sizes = st.floats(0.2, 8.0)
yaws = st.floats(-4 * math.pi, 4 * math.pi)
boxes = st.builds(Box3D, finite, finite, st.floats(-3, 3), sizes, sizes, sizes, yaws)


def test_box_rejects_bad_sizes():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0, 1, 1, 0)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 1, -1, 1, 0)
    with pytest.raises(ValueError):
        Box3D(0, 0, float("nan"), 1, 1, 1, 0)


def test_point_cloud_shape_checked():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)))
    assert len(PointCloud(np.zeros((0, 4)))) == 0


@pytest.mark.parametrize("box,p,expected", [
    (Box3D(0, 0, 0, 1, 1, 1, 0), [2, 0, 0, 0.5], [2, 0, 0, 0.5]),
    (Box3D(1, 0, 0, 1, 1, 1, 0), [2, 0, 0, 0.5], [1, 0, 0, 0.5]),
    (Box3D(0, 0, 0, 1, 1, 1, math.pi / 2), [1, 1, 0, 0], [1, -1, 0, 0]),
])
def test_to_canonical_examples(box, p, expected):
    np.testing.assert_allclose(to_canonical(np.array(p, float), box), expected, atol=1e-15)


def test_unit_cube_corners():
    got = {tuple(np.round(c, 12)) for c in box_corners(UNIT)}
    want = {(sx * 0.5, sy * 0.5, sz * 0.5) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)}
    assert got == want


def test_diagonal_corners_unit_cube():
    np.testing.assert_array_equal(diagonal_corners(UNIT), [-0.5, -0.5, -0.5, 0.5, 0.5, 0.5])


def test_rotated_corner():
    b = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
    corners = box_corners(b)
    # corner (+,+,+) is the first row
    np.testing.assert_allclose(corners[0], [0, math.sqrt(2) / 2, 0.5], atol=1e-15)


@pytest.mark.parametrize("x,sigma,inside", [(0.49, 0, True), (0.51, 0, False), (0.69, 0.4, True), (0.71, 0.4, False)])
def test_point_in_box_examples(x, sigma, inside):
    assert point_in_box(np.array([x, 0, 0, 0.0]), UNIT, sigma) is inside


def test_point_in_box_closed_faces():
    assert point_in_box(np.array([0.5, 0.5, -0.5, 0.0]), UNIT)
    assert point_in_box(np.array([0.7, 0.0, 0.0, 0.0]), UNIT, 0.4)


def test_point_in_box_negative_sigma():
    with pytest.raises(ValueError):
        point_in_box(np.zeros(4), UNIT, -0.1)


def test_box_frames_layout():
    f = box_frames([Box3D(1, 2, 3, 4, 2, 1, 0.3)], 0.4)[0]
    np.testing.assert_allclose(f, [1, 2, 3, math.cos(0.3), math.sin(0.3), 2.2, 1.2, 0.7])


def test_iou_examples():
    assert iou_3d(UNIT, UNIT) == 1.0
    assert iou_3d(UNIT, Box3D(100, 0, 0, 1, 1, 1, 0)) == 0.0
    assert iou_3d(UNIT, Box3D(0.5, 0, 0, 1, 1, 1, 0)) == pytest.approx(1 / 3, abs=1e-12)
    assert iou_bev(UNIT, Box3D(0.5, 0, 5, 1, 1, 1, 0)) == pytest.approx(1 / 3, abs=1e-12)
    assert iou_3d(UNIT, Box3D(0, 0, 5, 1, 1, 1, 0)) == 0.0


def test_iou_rotated_square_in_circle():
    # a square rotated by 45 degrees inside the same-size square: octagon overlap
    a = Box3D(0, 0, 0, 2, 2, 1, 0)
    b = Box3D(0, 0, 0, 2, 2, 1, math.pi / 4)
    octagon = 8 * (math.sqrt(2) - 1)
    assert iou_bev(a, b) == pytest.approx(octagon / (8 - octagon), abs=1e-12)


def test_clip_convex_square():
    a = bev_polygon(Box3D(0, 0, 0, 2, 2, 1, 0))
    b = bev_polygon(Box3D(1, 1, 0, 2, 2, 1, 0))
    poly = np.array(clip_convex(a, b))
    assert poly[:, 0].min() == pytest.approx(0) and poly[:, 0].max() == pytest.approx(1)


def test_bev_polygon_is_ccw():
    p = bev_polygon(Box3D(3, -2, 0, 4, 1.5, 1, 1.1))
    x, y = p[:, 0], p[:, 1]
    assert 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) == pytest.approx(6.0)


@settings(max_examples=200, deadline=None)
@given(boxes, st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_canonical_round_trip(box, p):
    p = np.array(p) * 10
    np.testing.assert_allclose(from_canonical(to_canonical(p, box), box), p, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou_3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou_3d(b, a)
    assert iou_bev(a, b) == iou_bev(b, a)


def test_iou_far_from_origin_keeps_precision():
    # small axis-aligned boxes far out: closed form 0.25 * overlap / union
    a = Box3D(34.0, 31.0, 0.0, 0.5, 1.0, 1.0, 0.0)
    b = Box3D(34.0, 30.70017154386415, 0.0, 0.25, 1.0, 1.0, 0.0)
    inter = 0.25 * (1.0 - (31.0 - 30.70017154386415))
    expect = inter / (0.5 + 0.25 - inter)
    assert iou_bev(a, b) == iou_bev(b, a) == pytest.approx(expect, rel=1e-13)


@settings(max_examples=100, deadline=None)
@given(boxes)
def test_iou_yaw_period(a):
    b = Box3D(a.cx, a.cy, a.cz, a.l, a.w, a.h, a.yaw + math.pi)
    assert iou_3d(a, b) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100))
def test_wrap_angle_range(t):
    w = wrap_angle(t)
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(t), abs_tol=1e-9)
