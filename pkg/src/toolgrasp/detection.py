"""Baseline tool detector and detection metrics (COCO-style mAP, confusion matrix).

The detector is deliberately not learned: it segments everything standing
above the table, measures a handful of shape and height features per blob and
assigns the nearest class prototype.  Anything that yields boxes, classes and
confidences can replace it.
"""
from __future__ import annotations

import functools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dataset import CLASS_NAMES, TOOLS, Pose, ParseError, synth_scene
from .geometry import BBox, OrientedBox, bbox_iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    confidence: float
    footprint: OrientedBox | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def class_id(self) -> int:
        return self.bbox.class_id


# ---------------------------------------------------------------------------
# baseline detector
# ---------------------------------------------------------------------------

FEATURE_SCALES = np.array([120.0, 4.0, 2.0, 1.0, 0.008, 0.008])


@dataclass(frozen=True)
class DetectorConfig:
    height_threshold: float = 0.01
    min_area: int = 30
    nms_iou: float | None = None


def blob_features(mask: np.ndarray, heights: np.ndarray) -> np.ndarray:
    """Area, length, width, hole count, mean and 90th-percentile height of one blob."""
    rows, cols = np.nonzero(mask)
    pts = np.stack([cols, rows], axis=1).astype(float)
    centred = pts - pts.mean(axis=0)
    _, vecs = np.linalg.eigh(centred.T @ centred)
    major = vecs[:, 1]
    along = centred @ major
    across = centred @ vecs[:, 0]
    filled = ndimage.binary_fill_holes(mask)
    hole_labels, n_holes = ndimage.label(filled & ~mask)
    if n_holes:
        sizes = ndimage.sum_labels(np.ones_like(mask, dtype=float), hole_labels, range(1, n_holes + 1))
        n_holes = int((sizes >= 3).sum())
    h = heights[mask]
    return np.array(
        [
            float(mask.sum()),
            float(along.max() - along.min() + 1),
            float(across.max() - across.min() + 1),
            float(n_holes),
            float(h.mean()),
            float(np.percentile(h, 90)),
        ]
    )


def blob_footprint(mask: np.ndarray, heights: np.ndarray) -> OrientedBox:
    """Oriented box of a blob with its heading towards the lower-profile end."""
    rows, cols = np.nonzero(mask)
    pts = np.stack([cols, rows], axis=1).astype(float)
    mean = pts.mean(axis=0)
    centred = pts - mean
    _, vecs = np.linalg.eigh(centred.T @ centred)
    major = vecs[:, 1]
    along = centred @ major
    across = centred @ vecs[:, 0]
    mid_along = (along.max() + along.min()) / 2
    h = heights[rows, cols]
    # the far (hazard) end of every tool is its flatter end
    if h[along > mid_along].mean() > h[along < mid_along].mean():
        major = -major
        along = -along
        mid_along = -mid_along
    minor = np.array([-major[1], major[0]])
    across = centred @ minor
    mid_across = (across.max() + across.min()) / 2
    center = mean + mid_along * major + mid_across * minor
    return OrientedBox(
        cx=float(center[0]),
        cy=float(center[1]),
        length=float(along.max() - along.min() + 1),
        width=float(across.max() - across.min() + 1),
        heading=math.atan2(major[1], major[0]),
    )


def segment(depth: np.ndarray, cfg: DetectorConfig = DetectorConfig()):
    """Height-above-table map and labelled blobs (8-connected, small ones dropped)."""
    smooth = ndimage.median_filter(np.asarray(depth, dtype=float), size=3, mode="nearest")
    heights = np.median(smooth) - smooth
    mask = heights > cfg.height_threshold
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    keep = []
    for i in range(1, n + 1):
        if (labels == i).sum() >= cfg.min_area:
            keep.append(i)
    return heights, labels, keep


@functools.lru_cache(maxsize=None)
@functools.lru_cache(maxsize=None)
def class_prototypes() -> np.ndarray:
    """Mean feature vector per class, from noise-free renders at several headings (computed once)."""
    protos = []
    for tool in TOOLS:
        feats = []
        for k in range(6):
            scene = synth_scene([(tool, Pose(48.0, 48.0, k * math.pi / 6 + 0.1))], 96, 96, seed=0, noise_sigma=0.0, dropout=0.0)
            heights, labels, keep = segment(scene.depth)
            biggest = max(keep, key=lambda i: (labels == i).sum())
            feats.append(blob_features(labels == biggest, heights))
        protos.append(np.mean(feats, axis=0))
    out = np.array(protos)
    out.flags.writeable = False
    return out


def classify(features: np.ndarray) -> tuple[int, float]:
    d = np.linalg.norm((class_prototypes() - features) / FEATURE_SCALES, axis=1)
    best = int(np.argmin(d))
    return best, float(math.exp(-d[best] / 2))


def baseline_detect(depth: np.ndarray, cfg: DetectorConfig = DetectorConfig()) -> list[Detection]:
    """Detect tools in a top-down depth image, ordered by blob label (raster order)."""
    depth = np.asarray(depth, dtype=float)
    if depth.size == 0:
        return []
    h, w = depth.shape
    heights, labels, keep = segment(depth, cfg)
    dets = []
    for i in keep:
        mask = labels == i
        cls, conf = classify(blob_features(mask, heights))
        rows, cols = np.nonzero(mask)
        box = BBox.from_pixels(cls, cols.min(), rows.min(), cols.max() + 1, rows.max() + 1, w, h)
        dets.append(Detection(box, conf, blob_footprint(mask, heights)))
    if cfg.nms_iou is not None:
        dets = nms(dets, cfg.nms_iou)
    return dets


def nms(dets: Sequence[Detection], iou: float) -> list[Detection]:
    """Greedy IoU suppression across classes; keeps input order among survivors."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[int] = []
    for i in order:
        if all(bbox_iou(dets[i].bbox, dets[j].bbox) < iou for j in kept):
            kept.append(i)
    return [dets[i] for i in sorted(kept)]


# ---------------------------------------------------------------------------
# detections file
# ---------------------------------------------------------------------------

def parse_detections(text: str) -> list[Detection]:
    """``class cx cy w h conf`` per line."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, bw, bh, conf = (float(v) for v in parts[1:])
            out.append(Detection(BBox.clamped(cls, cx, cy, bw, bh), conf))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return out


def format_detections(dets: Sequence[Detection]) -> str:
    return "".join(
        f"{d.class_id} {d.bbox.cx:.6f} {d.bbox.cy:.6f} {d.bbox.bw:.6f} {d.bbox.bh:.6f} {d.confidence:.6f}\n" for d in dets
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags of confidence-sorted detections."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def match_class(dets_per_image, gts_per_image, class_id: int, threshold: float) -> tuple[np.ndarray, int]:
    """Greedy confidence-ordered matching for one class; returns TP flags and GT count."""
    ranked = []
    for img, dets in enumerate(dets_per_image):
        for j, d in enumerate(dets):
            if d.class_id == class_id:
                ranked.append((-d.confidence, img, j, d))
    ranked.sort(key=lambda r: r[:3])
    gts = [[g for g in image_gts if g.class_id == class_id] for image_gts in gts_per_image]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(ranked))
    for k, (_, img, _, det) in enumerate(ranked):
        best, best_iou = -1, threshold
        for gi, gt in enumerate(gts[img] if img < len(gts) else []):
            if used[img][gi]:
                continue
            iou = bbox_iou(det.bbox, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = gi, iou
        if best >= 0:
            used[img][best] = True
            tp[k] = 1.0
    return tp, sum(len(g) for g in gts)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    ap: dict[int, list[float]]
    map50: float
    map50_95: float
    confusion: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def confusion_normalized(self) -> np.ndarray:
        return column_normalize(self.confusion)

    def to_text(self) -> str:
        """JSON with a fixed key order: thresholds, per_class, mAP50, mAP50-95, confusion."""
        per_class = {}
        for c in sorted(self.ap):
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            per_class[name] = {"AP": [round(v, 6) for v in self.ap[c]]}
        doc = {
            "thresholds": list(self.thresholds),
            "per_class": per_class,
            "mAP50": round(self.map50, 6),
            "mAP50-95": round(self.map50_95, 6),
            "confusion": self.confusion.astype(int).tolist(),
            "confusion_column_normalized": np.round(self.confusion_normalized(), 6).tolist(),
        }
        return json.dumps(doc, indent=2) + "\n"


def compute_map(
    dets_per_image,
    gts_per_image,
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    n_classes: int = len(CLASS_NAMES),
    confusion_iou: float = 0.5,
) -> EvalReport:
    """Per-class AP at each IoU threshold, mAP50 and mAP50-95.

    Classes that appear in neither detections nor ground truth are skipped; a
    class that is only ever detected scores AP 0 (with a warning).
    """
    thresholds = tuple(float(t) for t in iou_thresholds)
    if list(thresholds) != sorted(thresholds):
        raise ValueError("IoU thresholds must be sorted")
    gt_classes = {g.class_id for image in gts_per_image for g in image}
    det_classes = {d.class_id for image in dets_per_image for d in image}
    ap: dict[int, list[float]] = {}
    for c in sorted(gt_classes | det_classes):
        if c not in gt_classes:
            warnings.warn(f"class {c} is detected but has no ground truth; AP set to 0", stacklevel=2)
            ap[c] = [0.0] * len(thresholds)
            continue
        ap[c] = [interpolated_ap(*match_class(dets_per_image, gts_per_image, c, t)) for t in thresholds]
    if ap:
        table = np.array([ap[c] for c in sorted(ap)])
        per_threshold = table.mean(axis=0)
    else:
        per_threshold = np.zeros(len(thresholds))
    map50 = float(per_threshold[thresholds.index(0.5)]) if 0.5 in thresholds else float("nan")
    return EvalReport(
        thresholds=thresholds,
        ap=ap,
        map50=map50,
        map50_95=float(per_threshold.mean()),
        confusion=confusion_matrix(dets_per_image, gts_per_image, confusion_iou, n_classes=max([n_classes, *[c + 1 for c in ap]])),
    )


def confusion_matrix(dets_per_image, gts_per_image, iou_min: float = 0.5, n_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    """Counts of (true class, predicted class); the last column is 'missed'.

    Within each image, GT/detection pairs with IoU >= ``iou_min`` are matched
    one-to-one in descending IoU order (ties by GT index, then detection index).
    """
    matrix = np.zeros((n_classes, n_classes + 1), dtype=np.int64)
    for img, gts in enumerate(gts_per_image):
        dets = dets_per_image[img] if img < len(dets_per_image) else []
        pairs = []
        for gi, g in enumerate(gts):
            for di, d in enumerate(dets):
                iou = bbox_iou(g, d.bbox)
                if iou >= iou_min:
                    pairs.append((-iou, gi, di))
        pairs.sort()
        gt_used, det_used = set(), set()
        for _, gi, di in pairs:
            if gi in gt_used or di in det_used:
                continue
            gt_used.add(gi)
            det_used.add(di)
            matrix[gts[gi].class_id, dets[di].class_id] += 1
        for gi, g in enumerate(gts):
            if gi not in gt_used:
                matrix[g.class_id, n_classes] += 1
    return matrix


def column_normalize(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    sums = matrix.sum(axis=0, keepdims=True)
    return np.divide(matrix, sums, out=np.zeros_like(matrix), where=sums > 0)
