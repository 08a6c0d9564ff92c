"""Grasp-rectangle and bounding-box geometry.

Conventions
-----------
Image coordinates: ``x`` is the column, ``y`` is the row, both in pixels.
A grasp angle ``theta`` is the direction of the gripper closing axis (the
``w`` side of the rectangle) measured from the +x axis towards +y.  Two-jaw
grippers are symmetric under a half turn, so angles are kept in
``[-pi/2, pi/2)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_IOU_MIN = 0.25
DEFAULT_ANGLE_MAX = math.radians(30.0)


class GeometryError(ValueError):
    """Raised for non-finite or degenerate geometric input."""


def wrap_angle(theta: float) -> float:
    """Map ``theta`` to its representative in ``[-pi/2, pi/2)`` modulo pi."""
    if not math.isfinite(theta):
        raise GeometryError(f"angle must be finite, got {theta!r}")
    wrapped = math.fmod(theta + math.pi / 2, math.pi)
    if wrapped < 0:
        wrapped += math.pi
    wrapped -= math.pi / 2
    # fmod can land exactly on +pi/2 after rounding
    if wrapped >= math.pi / 2:
        wrapped -= math.pi
    return wrapped


@dataclass(frozen=True)
class GraspRect:
    """Oriented grasp rectangle ``(x, y, h, w, theta)``."""

    x: float
    y: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h", "theta"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise GeometryError(f"GraspRect.{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"GraspRect needs w > 0 and h > 0, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def area(self) -> float:
        return self.w * self.h

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit vectors along the closing (w) and jaw (h) directions."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([c, s]), np.array([-s, c])

    def contains(self, px, py) -> np.ndarray | bool:
        """Point-in-rectangle test (closed), vectorized over ``px, py``."""
        u, v = self.axes()
        dx = np.asarray(px, dtype=float) - self.x
        dy = np.asarray(py, dtype=float) - self.y
        along = dx * u[0] + dy * u[1]
        across = dx * v[0] + dy * v[1]
        return (np.abs(along) <= self.w / 2) & (np.abs(across) <= self.h / 2)

    def translated(self, dx: float, dy: float) -> GraspRect:
        return GraspRect(self.x + dx, self.y + dy, self.w, self.h, self.theta)

    def scaled(self, factor: float) -> GraspRect:
        return GraspRect(self.x * factor, self.y * factor, self.w * factor, self.h * factor, self.theta)


def rect_corners(g: GraspRect) -> np.ndarray:
    """Corners of ``g`` as a (4, 2) array, counter-clockwise in (x, y)."""
    u, v = g.axes()
    hw, hh = g.w / 2, g.h / 2
    center = np.array([g.x, g.y])
    return np.array(
        [
            center - hw * u - hh * v,
            center + hw * u - hh * v,
            center + hw * u + hh * v,
            center - hw * u + hh * v,
        ]
    )


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs, output = output, []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=float).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rect_iou(a: GraspRect, b: GraspRect) -> float:
    """Intersection-over-union of two oriented rectangles."""
    if a.area <= 0 or b.area <= 0:
        raise GeometryError("rect_iou is undefined for zero-area rectangles")
    if a == b:  # clipping round-off would otherwise leave this a hair below 1
        return 1.0
    inter_poly = clip_polygon(rect_corners(a), rect_corners(b))
    inter = max(polygon_area(inter_poly), 0.0)
    union = a.area + b.area - inter
    return float(min(max(inter / union, 0.0), 1.0))


def angle_diff(a: float, b: float) -> float:
    """Unsigned grasp-angle difference, accounting for pi symmetry."""
    return abs(wrap_angle(a - b))


def grasp_match(
    pred: GraspRect,
    gt: GraspRect,
    iou_min: float = DEFAULT_IOU_MIN,
    angle_max: float = DEFAULT_ANGLE_MAX,
) -> bool:
    """Rectangle metric: IoU at least ``iou_min`` and angle within ``angle_max`` (radians)."""
    if iou_min <= 0 or angle_max <= 0:
        raise GeometryError("grasp_match thresholds must be positive")
    if angle_diff(pred.theta, gt.theta) > angle_max:
        return False
    return rect_iou(pred, gt) >= iou_min


def match_any(pred: GraspRect, gts, iou_min=DEFAULT_IOU_MIN, angle_max=DEFAULT_ANGLE_MAX) -> bool:
    return any(grasp_match(pred, gt, iou_min, angle_max) for gt in gts)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized image coordinates (YOLO convention)."""

    class_id: int
    cx: float
    cy: float
    bw: float
    bh: float

    def __post_init__(self):
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise GeometryError(f"class_id must be a non-negative integer, got {self.class_id!r}")
        object.__setattr__(self, "class_id", int(self.class_id))
        for name in ("cx", "cy", "bw", "bh"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise GeometryError(f"BBox.{name} must be finite")
            object.__setattr__(self, name, value)
        if not (0 < self.bw <= 1 and 0 < self.bh <= 1):
            raise GeometryError(f"BBox size must be in (0, 1], got {self.bw}x{self.bh}")
        tol = 1e-9
        x0, y0, x1, y1 = self.xyxy
        if x0 < -tol or y0 < -tol or x1 > 1 + tol or y1 > 1 + tol:
            raise GeometryError(f"BBox {self.xyxy} leaves the unit square")

    @classmethod
    def clamped(cls, class_id: int, cx: float, cy: float, bw: float, bh: float) -> BBox:
        """Build a box, clamping it into the unit square with a warning if needed."""
        x0, x1 = cx - bw / 2, cx + bw / 2
        y0, y1 = cy - bh / 2, cy + bh / 2
        cx0, cx1 = min(max(x0, 0.0), 1.0), min(max(x1, 0.0), 1.0)
        cy0, cy1 = min(max(y0, 0.0), 1.0), min(max(y1, 0.0), 1.0)
        if (cx0, cx1, cy0, cy1) == (x0, x1, y0, y1):
            return cls(class_id, cx, cy, bw, bh)  # keep the given values bit-exact
        warnings.warn(f"box ({cx}, {cy}, {bw}, {bh}) clamped to the unit square", stacklevel=2)
        if cx1 <= cx0 or cy1 <= cy0:
            raise GeometryError(f"box ({cx}, {cy}, {bw}, {bh}) has no area inside the image")
        return cls(class_id, (cx0 + cx1) / 2, (cy0 + cy1) / 2, cx1 - cx0, cy1 - cy0)

    @classmethod
    def from_pixels(cls, class_id: int, x0: float, y0: float, x1: float, y1: float, width: int, height: int) -> BBox:
        return cls.clamped(class_id, (x0 + x1) / 2 / width, (y0 + y1) / 2 / height, (x1 - x0) / width, (y1 - y0) / height)

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.bw / 2, self.cy - self.bh / 2, self.cx + self.bw / 2, self.cy + self.bh / 2)

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.xyxy
        return (x0 * width, y0 * height, x1 * width, y1 * height)

    def contains_pixel(self, x: float, y: float, width: int, height: int) -> bool:
        x0, y0, x1, y1 = self.to_pixels(width, height)
        return x0 <= x <= x1 and y0 <= y <= y1


def bbox_iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy
    bx0, by0, bx1, by1 = b.xyxy
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.bw * a.bh + b.bw * b.bh - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class OrientedBox:
    """Tool footprint as an oriented box.

    ``heading`` (radians, full turn) is the direction of the major axis from
    the tool's base end towards its far end; ``length`` is measured along it.
    """

    cx: float
    cy: float
    length: float
    width: float
    heading: float

    def local(self, px, py) -> tuple[np.ndarray, np.ndarray]:
        """Fractional coordinates: ``t`` runs 0 to 1 from base to far end and ``s`` -0.5 to 0.5 across, for points inside the box."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx = np.asarray(px, dtype=float) - self.cx
        dy = np.asarray(py, dtype=float) - self.cy
        along = (dx * c + dy * s) / self.length
        across = (-dx * s + dy * c) / self.width
        return along + 0.5, across
