import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toolgrasp.dataset import ParseError, random_scene
from toolgrasp.detection import (
    COCO_THRESHOLDS,
    Detection,
    baseline_detect,
    column_normalize,
    compute_map,
    confusion_matrix,
    format_detections,
    interpolated_ap,
    nms,
    parse_detections,
)
from toolgrasp.geometry import BBox, bbox_iou


def det(cls, cx, cy, bw, bh, conf):
    return Detection(BBox(cls, cx, cy, bw, bh), conf)


# hand-computed AP cases -----------------------------------------------------------

def test_ap_single_exact_detection():
    gt = BBox(2, 0.5, 0.5, 0.2, 0.2)
    report = compute_map([[Detection(gt, 1.0)]], [[gt]])
    assert report.ap[2] == [1.0] * 10
    assert report.map50 == 1.0 and report.map50_95 == 1.0


def test_ap_no_detections():
    report = compute_map([[]], [[BBox(1, 0.5, 0.5, 0.2, 0.2)]])
    assert report.ap[1] == [0.0] * 10


def test_ap_mixed_tp_fp_tp():
    g1, g2 = BBox(0, 0.25, 0.25, 0.2, 0.2), BBox(0, 0.75, 0.75, 0.2, 0.2)
    dets = [Detection(g1, 0.9), det(0, 0.5, 0.1, 0.1, 0.1, 0.8), Detection(g2, 0.7)]
    report = compute_map([dets], [[g1, g2]], iou_thresholds=(0.5,))
    # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1; the envelope is 1 up to recall 0.5
    # (51 recall points) and 2/3 for the remaining 50
    assert abs(report.ap[0][0] - (51 + 50 * 2 / 3) / 101) < 1e-12


def test_interpolated_ap_edges():
    assert interpolated_ap(np.array([]), 3) == 0.0
    assert interpolated_ap(np.array([1.0]), 0) == 0.0
    assert interpolated_ap(np.array([0.0, 1.0]), 1) == pytest.approx(0.5, abs=1e-12)


def test_detected_class_without_gt_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = compute_map([[det(4, 0.5, 0.5, 0.2, 0.2, 0.9)]], [[BBox(1, 0.5, 0.5, 0.2, 0.2)]])
    assert report.ap[4] == [0.0] * 10
    assert any("no ground truth" in str(w.message) for w in caught)


def test_unsorted_thresholds_rejected():
    with pytest.raises(ValueError):
        compute_map([[]], [[]], iou_thresholds=(0.7, 0.5))


# properties --------------------------------------------------------------------------

def random_case(rng, n_img=3):
    gts, dets = [], []
    for _ in range(n_img):
        g = [BBox(int(rng.integers(3)), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)) for _ in range(rng.integers(1, 4))]
        d = []
        for box in g:
            if rng.uniform() < 0.8:
                jitter = BBox.clamped(box.class_id, box.cx + rng.normal(0, 0.03), box.cy + rng.normal(0, 0.03), box.bw, box.bh)
                d.append(Detection(jitter, float(rng.uniform(0.05, 1.0))))
        for _ in range(rng.integers(0, 3)):
            d.append(det(int(rng.integers(3)), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.1, 0.1, float(rng.uniform(0.05, 1.0))))
        gts.append(g)
        dets.append(d)
    return dets, gts


@pytest.mark.parametrize("seed", range(10))
def test_ap_monotone_in_threshold(seed):
    dets, gts = random_case(np.random.default_rng(seed))
    report = compute_map(dets, gts)
    for aps in report.ap.values():
        assert all(0.0 <= a <= 1.0 for a in aps)
        assert all(a >= b for a, b in zip(aps, aps[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_ap_rank_based_and_order_free(seed):
    rng = np.random.default_rng(100 + seed)
    dets, gts = random_case(rng)
    base = compute_map(dets, gts)
    scaled = [[Detection(d.bbox, d.confidence * 0.5) for d in image] for image in dets]
    shuffled = [[image[i] for i in rng.permutation(len(image))] for image in dets]
    for other in (compute_map(scaled, gts), compute_map(shuffled, gts)):
        assert other.ap == base.ap


@pytest.mark.parametrize("seed", range(5))
def test_confusion_rows_sum_to_gt_counts(seed):
    dets, gts = random_case(np.random.default_rng(200 + seed))
    m = confusion_matrix(dets, gts)
    counts = np.bincount([g.class_id for image in gts for g in image], minlength=8)
    assert np.array_equal(m.sum(axis=1), counts)


def test_confusion_examples():
    boxes = [BBox(c, 0.1 + 0.1 * c, 0.5, 0.08, 0.2) for c in range(8)]
    perfect = confusion_matrix([[Detection(b, 1.0) for b in boxes]], [boxes])
    assert np.array_equal(perfect[:, :8], np.eye(8, dtype=int)) and not perfect[:, 8].any()
    always0 = confusion_matrix([[Detection(BBox(0, b.cx, b.cy, b.bw, b.bh), 1.0) for b in boxes]], [boxes])
    assert always0[:, 0].sum() == 8 and always0[:, 1:].sum() == 0
    file_gt = BBox(2, 0.5, 0.5, 0.3, 0.1)
    m = confusion_matrix([[Detection(BBox(6, 0.5, 0.5, 0.3, 0.1), 0.9)]], [[file_gt]])
    assert m[2, 6] == 1 and m.sum() == 1
    missed = confusion_matrix([[]], [[file_gt]])
    assert missed[2, 8] == 1


def test_column_normalize():
    m = column_normalize(np.array([[2, 0, 1], [2, 0, 0]]))
    assert m.tolist() == [[0.5, 0.0, 1.0], [0.5, 0.0, 0.0]]


def test_report_text_key_order():
    import json

    gt = BBox(0, 0.5, 0.5, 0.2, 0.2)
    doc = json.loads(compute_map([[Detection(gt, 0.9)]], [[gt]]).to_text())
    assert list(doc) == ["thresholds", "per_class", "mAP50", "mAP50-95", "confusion", "confusion_column_normalized"]
    assert doc["thresholds"] == list(COCO_THRESHOLDS)


# detector --------------------------------------------------------------------------

def test_blank_scene_no_detections():
    assert baseline_detect(np.full((64, 64), 0.7)) == []
    assert baseline_detect(np.zeros((0, 0))) == []


def test_single_hammer_detected():
    scene = random_scene(1, 160, 160, seed=3, classes=[1])
    dets = baseline_detect(scene.depth)
    assert len(dets) == 1
    assert dets[0].class_id == 1
    assert bbox_iou(dets[0].bbox, scene.boxes[0]) >= 0.8


def test_two_tools_two_detections():
    scene = random_scene(2, 160, 160, seed=8, classes=[0, 6])
    dets = baseline_detect(scene.depth)
    assert len(dets) == 2
    assert sorted(d.class_id for d in dets) == sorted(b.class_id for b in scene.boxes)


@pytest.mark.parametrize("cls", range(8))
def test_detector_per_class(cls):
    scene = random_scene(1, 160, 160, seed=50 + cls, classes=[cls])
    (d,) = baseline_detect(scene.depth)
    assert d.class_id == cls and d.confidence > 0.5


def test_nms_keeps_best_of_overlap():
    a = det(0, 0.5, 0.5, 0.2, 0.2, 0.6)
    b = det(1, 0.51, 0.5, 0.2, 0.2, 0.9)
    c = det(2, 0.1, 0.1, 0.1, 0.1, 0.3)
    assert nms([a, b, c], 0.5) == [b, c]


# detections file ----------------------------------------------------------------------

def test_detections_round_trip():
    dets = [det(3, 0.123456, 0.5, 0.2, 0.1, 0.75), det(0, 0.9, 0.1, 0.05, 0.05, 1.0)]
    back = parse_detections(format_detections(dets))
    for a, b in zip(back, dets):
        assert a.class_id == b.class_id and a.confidence == b.confidence
        assert np.allclose([a.bbox.cx, a.bbox.cy, a.bbox.bw, a.bbox.bh], [b.bbox.cx, b.bbox.cy, b.bbox.bw, b.bbox.bh], atol=5e-7)


def test_detections_parse_errors():
    with pytest.raises(ParseError, match="line 2"):
        parse_detections("0 0.5 0.5 0.1 0.1 0.5\n0 0.5 0.5 0.1 0.1\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_detections("0 0.5 0.5 0.1 0.1 1.5\n")


@settings(max_examples=50)
@given(st.integers(0, 7), st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.01, 0.19), st.floats(0.01, 0.19), st.floats(0, 1))
def test_detections_round_trip_property(cls, cx, cy, bw, bh, conf):
    d = det(cls, cx, cy, bw, bh, conf)
    (back,) = parse_detections(format_detections([d]))
    assert back.class_id == cls
    assert abs(back.bbox.cx - cx) <= 5e-7 and abs(back.confidence - conf) <= 5e-7
