import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toolgrasp.geometry import (
    BBox,
    GeometryError,
    GraspRect,
    OrientedBox,
    angle_diff,
    bbox_iou,
    grasp_match,
    polygon_area,
    rect_corners,
    rect_iou,
    wrap_angle,
)

from oracles import raster_iou

finite = st.floats(-1e3, 1e3, allow_nan=False)
angles = st.floats(-20.0, 20.0, allow_nan=False)
rects = st.builds(
    GraspRect,
    st.floats(-50, 50),
    st.floats(-50, 50),
    st.floats(0.5, 40),
    st.floats(0.5, 40),
    angles,
)


def random_pair(rng):
    a = GraspRect(rng.uniform(20, 40), rng.uniform(20, 40), rng.uniform(4, 20), rng.uniform(3, 12), rng.uniform(-3, 3))
    b = GraspRect(a.x + rng.uniform(-6, 6), a.y + rng.uniform(-6, 6), rng.uniform(4, 20), rng.uniform(3, 12), rng.uniform(-3, 3))
    return a, b


# wrap_angle ---------------------------------------------------------------

def test_wrap_angle_examples():
    assert wrap_angle(0.0) == 0.0
    assert abs(wrap_angle(math.pi)) < 1e-15
    assert wrap_angle(2.0) == pytest.approx(2.0 - math.pi, abs=1e-15)
    assert wrap_angle(math.pi / 2) == -math.pi / 2
    assert wrap_angle(-math.pi / 2) == -math.pi / 2


def test_wrap_angle_rejects_non_finite():
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(GeometryError):
            wrap_angle(bad)


@given(angles, st.integers(-5, 5))
def test_wrap_angle_periodic_and_idempotent(theta, k):
    w = wrap_angle(theta)
    assert -math.pi / 2 <= w < math.pi / 2
    assert wrap_angle(w) == w
    assert angle_diff(wrap_angle(theta + k * math.pi), w) < 1e-12
    turns = (theta - w) / math.pi
    assert abs(turns - round(turns)) < 1e-9


# GraspRect / corners ------------------------------------------------------

def test_grasprect_validation():
    with pytest.raises(GeometryError):
        GraspRect(0, 0, 0, 1, 0)
    with pytest.raises(GeometryError):
        GraspRect(0, 0, 1, -1, 0)
    with pytest.raises(GeometryError):
        GraspRect(math.nan, 0, 1, 1, 0)
    assert GraspRect(0, 0, 1, 1, math.pi).theta == pytest.approx(0.0, abs=1e-15)


def test_corners_axis_aligned_square():
    c = rect_corners(GraspRect(0, 0, 2, 2, 0))
    assert sorted(map(tuple, np.round(c, 12))) == [(-1, -1), (-1, 1), (1, -1), (1, 1)]


def test_corners_diamond():
    c = rect_corners(GraspRect(0, 0, 2, 2, math.pi / 4))
    assert np.allclose(np.hypot(c[:, 0], c[:, 1]), math.sqrt(2))
    # every corner sits on a coordinate axis
    assert np.allclose(np.min(np.abs(c), axis=1), 0.0, atol=1e-12)


@given(rects)
def test_corners_centroid_and_winding(g):
    c = rect_corners(g)
    assert np.allclose(c.mean(axis=0), [g.x, g.y], atol=1e-12 * max(1.0, abs(g.x), abs(g.y)) + 1e-12)
    assert polygon_area(c) == pytest.approx(g.w * g.h, rel=1e-9)


# rect_iou -----------------------------------------------------------------

def test_iou_identity_and_disjoint():
    g = GraspRect(10, 10, 8, 4, 0.3)
    assert rect_iou(g, g) == pytest.approx(1.0, abs=1e-12)
    assert rect_iou(g, g.translated(100, 0)) == 0.0


def test_iou_half_overlap_closed_form():
    a = GraspRect(0, 0, 4, 2, 0)
    b = GraspRect(2, 0, 4, 2, 0)
    assert rect_iou(a, b) == pytest.approx(4 / 12, abs=1e-12)


def test_iou_matches_raster_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b = random_pair(rng)
        assert abs(rect_iou(a, b) - raster_iou(a, b)) < 1e-2


@settings(max_examples=60)
@given(rects, rects, st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi))
def test_iou_symmetric_bounded_and_rigid_invariant(a, b, dx, dy, phi):
    iou = rect_iou(a, b)
    assert 0.0 <= iou <= 1.0
    assert rect_iou(b, a) == pytest.approx(iou, abs=1e-9)

    def move(g):
        c, s = math.cos(phi), math.sin(phi)
        return GraspRect(c * g.x - s * g.y + dx, s * g.x + c * g.y + dy, g.w, g.h, g.theta + phi)

    assert rect_iou(move(a), move(b)) == pytest.approx(iou, abs=1e-9)


# grasp_match --------------------------------------------------------------

def test_grasp_match_examples():
    g = GraspRect(30, 30, 12, 6, 0.2)
    assert grasp_match(g, g)
    rotated = GraspRect(g.x, g.y, g.w, g.h, g.theta + math.radians(45))
    assert not grasp_match(rotated, g, 0.25, math.radians(30))


def test_grasp_match_crafted_iou_03():
    # two 10x10 squares, 10 degrees apart; shift found so the oracle IoU is about 0.3
    gt = GraspRect(0, 0, 10, 10, 0)
    pred = GraspRect(5.1, 0, 10, 10, math.radians(10))
    iou = raster_iou(pred, gt, factor=20)
    assert 0.27 < iou < 0.33
    assert abs(rect_iou(pred, gt) - iou) < 1e-2
    assert grasp_match(pred, gt, 0.25, math.radians(30))
    assert not grasp_match(pred, gt, 0.35, math.radians(30))


def test_angle_gate_uses_pi_symmetry():
    gt = GraspRect(0, 0, 10, 5, math.radians(-85))
    pred = GraspRect(0, 0, 10, 5, math.radians(85))
    assert angle_diff(pred.theta, gt.theta) == pytest.approx(math.radians(10))
    assert grasp_match(pred, gt)


@given(rects, st.floats(0.01, 1.0), st.floats(1e-3, math.pi / 2))
def test_grasp_match_reflexive(g, iou_min, angle_max):
    assert grasp_match(g, g, iou_min, angle_max)


# BBox ---------------------------------------------------------------------

def test_bbox_iou_examples():
    a = BBox(0, 0.5, 0.5, 0.5, 0.5)
    assert bbox_iou(a, a) == pytest.approx(1.0)
    assert bbox_iou(BBox(0, 0.2, 0.2, 0.2, 0.2), BBox(0, 0.8, 0.8, 0.2, 0.2)) == 0.0
    assert bbox_iou(a, BBox(0, 0.75, 0.5, 0.5, 0.5)) == pytest.approx(1 / 3, abs=1e-12)


def test_bbox_clamping_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        b = BBox.clamped(2, 0.95, 0.5, 0.2, 0.2)
    assert caught
    assert b.xyxy[2] == pytest.approx(1.0)
    assert b.bw == pytest.approx(0.15)
    with pytest.raises(GeometryError):
        BBox(0, 0.95, 0.5, 0.2, 0.2)
    with pytest.raises(GeometryError):
        BBox(-1, 0.5, 0.5, 0.2, 0.2)


def test_oriented_box_local_coordinates():
    box = OrientedBox(10, 10, 20, 4, math.pi / 2)
    t, s = box.local(np.array([10, 10, 10]), np.array([0, 10, 20]))
    assert np.allclose(t, [0, 0.5, 1])
    assert np.allclose(s, 0)
