"""Annotation formats and the synthetic tabletop scene generator.

Tools are 2.5-D extrusions of a few primitives (bars, tapering wedges and
rings) drawn into a top-down depth image of a flat table.  Every tool is
defined in a local frame whose +x axis points from its base (handle) end to
its far end, which is also where any hazardous part sits.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import BBox, GraspRect, wrap_angle

CLASS_NAMES = ("Allenkey", "Hammer", "File", "Knife", "Plier", "Scissor", "Screwdriver", "Wrench")
TABLE_DEPTH = 0.70
GRIPPER_CLEARANCE = 4.0
GRASP_SPACING = 3.0


class ParseError(ValueError):
    """Malformed annotation or image file; the message carries the line or byte offset."""


class PlacementError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tool shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bar:
    """Rectangle from ``start`` to ``end`` (local coords) of constant ``width``."""

    start: tuple[float, float]
    end: tuple[float, float]
    width: float
    height: float
    graspable: bool = True
    reflectance: float = 0.4

    def width_at(self, t: float) -> float:
        return self.width


@dataclass(frozen=True)
class Wedge(Bar):
    """Bar whose width tapers linearly from ``width`` to ``end_width``."""

    end_width: float = 1.0

    def width_at(self, t: float) -> float:
        return self.width + (self.end_width - self.width) * t


@dataclass(frozen=True)
class Ring:
    """Annulus, optionally open towards local +x by ``gap`` radians half-angle."""

    center: tuple[float, float]
    r_in: float
    r_out: float
    height: float
    gap: float = 0.0
    graspable: bool = False
    reflectance: float = 0.5


@dataclass(frozen=True)
class ToolShape:
    class_id: int
    parts: tuple
    hazard: tuple[float, float] | None = None  # fraction range along the tool, base end = 0

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.class_id]


def _tool_library() -> tuple[ToolShape, ...]:
    metal = 0.85
    return (
        ToolShape(0, (Bar((-22, 0), (22, 0), 4, 0.08, reflectance=metal),
                      Bar((-22, 0), (-22, 14), 4, 0.08, False, metal))),
        ToolShape(1, (Bar((-30, 0), (19, 0), 7, 0.11),
                      Bar((23, -12), (23, 12), 10, 0.14, False, metal))),
        ToolShape(2, (Bar((-30, 0), (-14, 0), 3, 0.074, reflectance=metal),
                      Bar((-14, 0), (30, 0), 8, 0.074, reflectance=metal))),
        ToolShape(3, (Bar((-30, 0), (2, 0), 9, 0.104),
                      Wedge((2, 0), (30, 0), 8, 0.077, reflectance=metal, end_width=2)),
                  hazard=(32 / 60, 1.0)),
        ToolShape(4, (Bar((-30, 5), (2, 2), 4, 0.086),
                      Bar((-30, -5), (2, -2), 4, 0.086),
                      Ring((4, 0), 0, 6, 0.098, reflectance=metal),
                      Wedge((6, 0), (24, 0), 9, 0.095, reflectance=metal, end_width=3))),
        ToolShape(5, (Ring((-22, 7), 3, 6.5, 0.086),
                      Ring((-22, -7), 3, 6.5, 0.086),
                      Bar((-17, 0), (0, 0), 7, 0.086),
                      Wedge((0, 0), (30, 0), 7, 0.074, reflectance=metal, end_width=1)),
                  hazard=(28.5 / 58.5, 1.0)),
        ToolShape(6, (Bar((-30, 0), (-4, 0), 11, 0.116),
                      Bar((-4, 0), (28, 0), 3, 0.08, reflectance=metal)),
                  hazard=(0.7, 1.0)),
        ToolShape(7, (Bar((-22, 0), (22, 0), 6, 0.08, reflectance=metal),
                      Ring((-28, 0), 4, 8, 0.08, reflectance=metal),
                      Ring((28, 0), 4, 8, 0.08, gap=math.radians(40), reflectance=metal))),
    )


TOOLS: tuple[ToolShape, ...] = _tool_library()


@dataclass(frozen=True)
class Pose:
    """Tool placement: centre in pixels and heading of the local +x axis (radians)."""

    x: float
    y: float
    angle: float


def _to_local(pose: Pose, cols, rows):
    c, s = math.cos(pose.angle), math.sin(pose.angle)
    dx, dy = cols - pose.x, rows - pose.y
    return dx * c + dy * s, -dx * s + dy * c


def _to_world(pose: Pose, lx, ly):
    c, s = math.cos(pose.angle), math.sin(pose.angle)
    return pose.x + lx * c - ly * s, pose.y + lx * s + ly * c


def _part_mask(part, lx, ly):
    if isinstance(part, Ring):
        dx, dy = lx - part.center[0], ly - part.center[1]
        r = np.hypot(dx, dy)
        mask = (r <= part.r_out) & (r >= part.r_in)
        if part.gap > 0:
            mask &= np.abs(np.arctan2(dy, dx)) > part.gap
        return mask
    (x0, y0), (x1, y1) = part.start, part.end
    length = math.hypot(x1 - x0, y1 - y0)
    ux, uy = (x1 - x0) / length, (y1 - y0) / length
    along = (lx - x0) * ux + (ly - y0) * uy
    across = -(lx - x0) * uy + (ly - y0) * ux
    t = np.clip(along / length, 0.0, 1.0)
    half = (part.width + (getattr(part, "end_width", part.width) - part.width) * t) / 2
    return (along >= 0) & (along <= length) & (np.abs(across) <= half)


def render_tool(shape: ToolShape, pose: Pose, height: int, width: int):
    """Rasterize a tool: returns (height map, part-index map with -1 = empty)."""
    rows, cols = np.mgrid[0:height, 0:width].astype(float)
    lx, ly = _to_local(pose, cols, rows)
    heights = np.zeros((height, width))
    labels = np.full((height, width), -1, dtype=int)
    for i, part in enumerate(shape.parts):
        mask = _part_mask(part, lx, ly)
        higher = mask & (part.height >= heights)
        heights[higher] = part.height
        labels[higher] = i
    return heights, labels


def hazard_mask(shape: ToolShape, pose: Pose, height: int, width: int) -> np.ndarray:
    """Pixels of the tool that belong to its hazardous parts (empty if none)."""
    heights, labels = render_tool(shape, pose, height, width)
    if shape.hazard is None:
        return np.zeros((height, width), dtype=bool)
    rows, cols = np.mgrid[0:height, 0:width].astype(float)
    lx, _ = _to_local(pose, cols, rows)
    lo, hi = tool_extent(shape)
    t = (lx - lo) / (hi - lo)
    return (labels >= 0) & (t >= shape.hazard[0]) & (t <= shape.hazard[1])


def tool_extent(shape: ToolShape) -> tuple[float, float]:
    """Min and max local x over all parts."""
    xs = []
    for part in shape.parts:
        if isinstance(part, Ring):
            xs += [part.center[0] - part.r_out, part.center[0] + part.r_out]
        else:
            (x0, y0), (x1, y1) = part.start, part.end
            spread = max(part.width, getattr(part, "end_width", part.width)) / 2
            spread *= abs(y1 - y0) / math.hypot(x1 - x0, y1 - y0)
            xs += [min(x0, x1) - spread, max(x0, x1) + spread]
    return min(xs), max(xs)


def tool_grasps(shape: ToolShape, pose: Pose, spacing: float = GRASP_SPACING) -> list[GraspRect]:
    """Ground-truth grasps across every graspable bar, perpendicular to it."""
    grasps = []
    for part in shape.parts:
        if isinstance(part, Ring) or not part.graspable:
            continue
        (x0, y0), (x1, y1) = part.start, part.end
        length = math.hypot(x1 - x0, y1 - y0)
        axis = math.atan2(y1 - y0, x1 - x0) + pose.angle
        n = max(int(length // spacing), 1)
        for i in range(n):
            t = (i + 0.5) / n
            cx, cy = _to_world(pose, x0 + t * (x1 - x0), y0 + t * (y1 - y0))
            w = part.width_at(t) + 2 * GRIPPER_CLEARANCE
            grasps.append(GraspRect(cx, cy, w, w / 2, wrap_angle(axis + math.pi / 2)))
    return grasps


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneRecord:
    depth: np.ndarray
    boxes: list[BBox]
    grasps: list[list[GraspRect]]
    seed: int
    intensity: np.ndarray | None = None
    poses: list[Pose] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def _pixel_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows, cols = np.nonzero(mask)
    return int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1


def _boxes_overlap(a, b, margin):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def synth_scene(
    tools: Sequence[tuple[ToolShape, Pose | None]],
    height: int = 160,
    width: int = 160,
    seed: int = 0,
    noise_sigma: float = 0.002,
    dropout: float = 0.001,
    margin: int = 4,
    max_attempts: int = 1000,
) -> SceneRecord:
    """Render tools onto a flat table and annotate boxes and grasps.

    Tools with ``pose=None`` are placed at random; all placements must keep
    the tool in frame and its box clear of earlier boxes by ``margin`` pixels.
    """
    rng = np.random.default_rng(seed)
    heights = np.zeros((height, width))
    reflect = np.full((height, width), 0.6)
    boxes, grasps, poses, placed = [], [], [], []
    for shape, pose in tools:
        candidates = [pose] if pose is not None else (
            Pose(
                float(rng.uniform(margin, width - margin)),
                float(rng.uniform(margin, height - margin)),
                float(rng.uniform(0, 2 * math.pi)),
            )
            for _ in range(max_attempts)
        )
        for trial in candidates:
            hmap, labels = render_tool(shape, trial, height, width)
            mask = labels >= 0
            if not mask.any():
                continue
            box = _pixel_box(mask)
            inside = box[0] >= margin and box[1] >= margin and box[2] <= width - margin and box[3] <= height - margin
            if inside and not any(_boxes_overlap(box, other, margin) for other in placed):
                break
        else:
            if pose is not None:
                raise PlacementError(f"{shape.name} at {pose} leaves the frame or overlaps another tool")
            raise PlacementError(f"could not place {shape.name} after {max_attempts} attempts")
        placed.append(box)
        poses.append(trial)
        heights = np.maximum(heights, hmap)
        for i, part in enumerate(shape.parts):
            reflect[labels == i] = part.reflectance
        boxes.append(BBox.from_pixels(shape.class_id, *box, width, height))
        grasps.append(tool_grasps(shape, trial))

    depth = TABLE_DEPTH - heights
    if noise_sigma > 0:
        depth = depth + rng.normal(0.0, noise_sigma, size=depth.shape)
    if dropout > 0:
        depth[rng.random(depth.shape) < dropout] = TABLE_DEPTH
    intensity = np.clip(reflect + rng.normal(0.0, 0.02, size=reflect.shape), 0.0, 1.0)
    return SceneRecord(depth=depth, boxes=boxes, grasps=grasps, seed=seed, intensity=intensity, poses=poses)


def random_scene(n_tools: int, height: int = 160, width: int = 160, seed: int = 0, classes=None, **kwargs) -> SceneRecord:
    """Scene with ``n_tools`` randomly chosen (seeded) tools at random poses."""
    rng = np.random.default_rng([seed, 7919])
    pool = list(range(len(TOOLS))) if classes is None else list(classes)
    picks = [TOOLS[pool[int(rng.integers(len(pool)))]] for _ in range(n_tools)]
    return synth_scene([(t, None) for t in picks], height, width, seed, **kwargs)


# ---------------------------------------------------------------------------
# YOLO and grasp annotation text
# ---------------------------------------------------------------------------

def _lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def parse_yolo(text: str) -> list[BBox]:
    """``class cx cy w h`` per line, normalized coordinates."""
    boxes = []
    for lineno, line in _lines(text):
        fields_ = line.split()
        if len(fields_) != 5:
            raise ParseError(f"line {lineno}: expected 5 fields, got {len(fields_)}")
        try:
            cls = int(fields_[0])
            cx, cy, bw, bh = (float(v) for v in fields_[1:])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        if cls < 0 or not all(math.isfinite(v) for v in (cx, cy, bw, bh)):
            raise ParseError(f"line {lineno}: invalid values")
        try:
            boxes.append(BBox.clamped(cls, cx, cy, bw, bh))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return boxes


def format_yolo(boxes: Sequence[BBox]) -> str:
    return "".join(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.bw:.6f} {b.bh:.6f}\n" for b in boxes)


def parse_grasps(text: str) -> list[GraspRect]:
    """``x;y;theta_deg;w;h`` per line; theta is converted to radians and wrapped."""
    grasps = []
    for lineno, line in _lines(text):
        fields_ = line.split(";")
        if len(fields_) != 5:
            raise ParseError(f"line {lineno}: expected 5 ';'-separated fields, got {len(fields_)}")
        try:
            x, y, theta_deg, w, h = (float(v) for v in fields_)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        if w <= 0 or h <= 0:
            raise ParseError(f"line {lineno}: grasp width and height must be positive")
        try:
            grasps.append(GraspRect(x, y, w, h, math.radians(theta_deg)))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return grasps


def format_grasps(grasps: Sequence[GraspRect]) -> str:
    return "".join(f"{g.x!r};{g.y!r};{math.degrees(g.theta)!r};{g.w!r};{g.h!r}\n" for g in grasps)


# ---------------------------------------------------------------------------
# 16-bit depth maps
# ---------------------------------------------------------------------------

def write_depth(path, plane: np.ndarray) -> None:
    """Binary PGM (P5, maxval 65535) plus a ``<path>.scale`` sidecar.

    Stored value ``v`` decodes to ``offset + scale * v``.
    """
    plane = np.asarray(plane, dtype=float)
    if plane.ndim != 2 or not np.isfinite(plane).all():
        raise ValueError("depth plane must be a finite 2-D array")
    lo, hi = float(plane.min()), float(plane.max())
    scale = (hi - lo) / 65535 if hi > lo else 1.0
    offset = lo
    raw = np.rint((plane - offset) / scale).astype(">u2")
    h, w = plane.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + raw.tobytes())
    Path(str(path) + ".scale").write_text(f"offset={offset!r}\nscale={scale!r}\n")


def _pgm_header(blob: bytes, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated header at byte {pos}")
        tokens.append((blob[start:pos], start))
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise ParseError(f"{path}: byte 0: expected magic P5, got {blob[:2]!r}")
    tokens, pos = _pgm_header(blob, path)
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"{path}: byte {tokens[1][1]}: bad header field") from exc
    if w < 1 or h < 1 or not 0 < maxval <= 65535:
        raise ParseError(f"{path}: byte {tokens[1][1]}: bad dimensions or maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(blob) - pos < need:
        raise ParseError(f"{path}: byte {pos}: payload has {len(blob) - pos} bytes, need {need}")
    return np.frombuffer(blob[pos : pos + need], dtype=dtype).reshape(h, w).astype(np.int64)


def read_depth(path) -> np.ndarray:
    raw = read_pgm(path)
    meta = {}
    for lineno, line in _lines(Path(str(path) + ".scale").read_text()):
        if "=" not in line:
            raise ParseError(f"{path}.scale: line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        meta[key.strip()] = float(value)
    if "offset" not in meta or "scale" not in meta:
        raise ParseError(f"{path}.scale: needs offset and scale")
    return meta["offset"] + meta["scale"] * raw.astype(float)


def write_intensity(path, plane: np.ndarray) -> None:
    raw = np.rint(np.clip(plane, 0, 1) * 255).astype("u1")
    h, w = raw.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + raw.tobytes())


# ---------------------------------------------------------------------------
# scene files and manifests
# ---------------------------------------------------------------------------

MANIFEST = "index.txt"


def write_scene(directory, stem: str, scene: SceneRecord) -> tuple[str, str, str]:
    """Write depth, box and grasp files for one scene; returns their names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = (f"{stem}.depth.pgm", f"{stem}.boxes.txt", f"{stem}.grasps.txt")
    write_depth(directory / names[0], scene.depth)
    (directory / names[1]).write_text(format_yolo(scene.boxes))
    (directory / names[2]).write_text(format_grasps([g for per in scene.grasps for g in per]))
    if scene.intensity is not None:
        write_intensity(directory / f"{stem}.intensity.pgm", scene.intensity)
    return names


def write_manifest(directory, entries: Sequence[tuple[str, str, str]]) -> Path:
    path = Path(directory) / MANIFEST
    path.write_text("".join(" ".join(e) + "\n" for e in entries))
    return path


def read_manifest(path) -> list[tuple[Path, Path, Path]]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    out = []
    for lineno, line in _lines(path.read_text()):
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}: line {lineno}: expected 3 file names")
        out.append(tuple(path.parent / p for p in parts))
    return out


def read_scene(depth_path, boxes_path, grasps_path, seed: int = -1) -> SceneRecord:
    """Load a scene; each grasp is assigned to the first box containing its centre."""
    depth = read_depth(depth_path)
    h, w = depth.shape
    boxes = parse_yolo(Path(boxes_path).read_text())
    grasps: list[list[GraspRect]] = [[] for _ in boxes]
    for g in parse_grasps(Path(grasps_path).read_text()):
        for i, b in enumerate(boxes):
            if b.contains_pixel(g.x, g.y, w, h):
                grasps[i].append(g)
                break
        else:
            warnings.warn(f"grasp at ({g.x:.1f}, {g.y:.1f}) lies in no box; dropped", stacklevel=2)
    intensity_path = Path(str(depth_path).replace(".depth.pgm", ".intensity.pgm"))
    intensity = read_pgm(intensity_path) / 255.0 if intensity_path.exists() and intensity_path != Path(depth_path) else None
    return SceneRecord(depth=depth, boxes=boxes, grasps=grasps, seed=seed, intensity=intensity)


# ---------------------------------------------------------------------------
# object crops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropWindow:
    """Square window ``[x0, x0 + side) x [y0, y0 + side)`` resampled to ``size`` pixels."""

    x0: float
    y0: float
    side: float
    size: int

    @property
    def scale(self) -> float:
        return self.size / self.side

    def to_scene(self, g: GraspRect) -> GraspRect:
        s = self.scale
        return GraspRect(self.x0 + g.x / s, self.y0 + g.y / s, g.w / s, g.h / s, g.theta)

    def to_crop(self, g: GraspRect) -> GraspRect:
        s = self.scale
        return GraspRect((g.x - self.x0) * s, (g.y - self.y0) * s, g.w * s, g.h * s, g.theta)


def crop_window(box: BBox, height: int, width: int, size: int = 96, pad: int = 8) -> CropWindow:
    """Padded square around ``box``; never smaller than ``size`` so tools are not magnified."""
    x0, y0, x1, y1 = box.to_pixels(width, height)
    side = max(max(x1 - x0, y1 - y0) + 2 * pad, size)
    side = float(math.ceil(side))
    return CropWindow(float(round((x0 + x1 - side) / 2)), float(round((y0 + y1 - side) / 2)), side, size)


def crop_plane(plane: np.ndarray, window: CropWindow, fill: float) -> np.ndarray:
    """Resample ``plane`` inside ``window``; outside the image reads as ``fill``."""
    idx = np.arange(window.size) / window.scale
    rows = window.y0 + idx[:, None] + np.zeros((1, window.size))
    cols = window.x0 + idx[None, :] + np.zeros((window.size, 1))
    if window.side == window.size:
        out = np.full((window.size, window.size), float(fill))
        r0, c0 = int(window.y0), int(window.x0)
        rs, cs = max(r0, 0), max(c0, 0)
        re, ce = min(r0 + window.size, plane.shape[0]), min(c0 + window.size, plane.shape[1])
        if re > rs and ce > cs:
            out[rs - r0 : re - r0, cs - c0 : ce - c0] = plane[rs:re, cs:ce]
        return out
    return ndimage.map_coordinates(plane, [rows, cols], order=1, mode="constant", cval=float(fill))


def object_crop(scene: SceneRecord, index: int, size: int = 96, pad: int = 8, box: BBox | None = None):
    """Depth crop, crop window and crop-frame ground-truth grasps for one object."""
    box = box or scene.boxes[index]
    h, w = scene.shape
    window = crop_window(box, h, w, size, pad)
    depth = crop_plane(scene.depth, window, float(np.median(scene.depth)))
    gts = [window.to_crop(g) for g in scene.grasps[index]] if index < len(scene.grasps) else []
    return depth, window, gts


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6) from an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB data, got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:2] != b"P6":
        raise ParseError(f"{path}: byte 0: expected magic P6, got {blob[:2]!r}")
    tokens, pos = _pgm_header(blob, path)
    w, h = int(tokens[1][0]), int(tokens[2][0])
    need = w * h * 3
    if len(blob) - pos < need:
        raise ParseError(f"{path}: byte {pos}: truncated payload")
    return np.frombuffer(blob[pos : pos + need], dtype=np.uint8).reshape(h, w, 3).copy()
