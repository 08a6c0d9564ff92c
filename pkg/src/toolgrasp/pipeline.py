"""End-to-end run: detect, crop, grasp, concepts, rules, filter, handover, plan.

Each stage of each object is timed and guarded; a failing stage is recorded
in the report and later objects still run unless ``strict`` is set.  The
report itself is canonical JSON (fixed key order, repr floats) so two runs
with the same inputs are byte-identical; wall-clock timings go to a
separate sidecar for that reason.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from skimage import draw

from . import concepts as C
from .dataset import (
    CLASS_NAMES,
    SceneRecord,
    crop_plane,
    crop_window,
    object_crop,
    random_scene,
    read_depth,
    read_manifest,
    read_scene,
    write_ppm,
)
from .detection import Detection, DetectorConfig, baseline_detect
from .geometry import GraspRect, OrientedBox, match_any, rect_corners
from .ggcnn import ConfigError, GgcnnConfig, GraspMaps, GraspNet, decode_grasps, encode_targets, parse_config_values, prepare_input
from .planner import CameraCalib, JointLimits, PlannerConfig, format_setpoints, grasp_to_pose, plan_task, plan_trajectory
from .safety import (
    SafetyRule,
    evaluate_rules,
    filter_grasps,
    refine_handover,
    rotation_action,
)
from . import tensor as T

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_SAFETY = 0, 2, 3, 4


@dataclass
class PipelineConfig:
    k: int = 5
    crop_size: int = 96
    crop_pad: int = 8
    worker_direction_deg: float = 90.0
    filter_mode: str = "remove"
    smoothing_sigma: float = 2.0
    dt: float = 0.008
    strict: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.filter_mode not in ("remove", "rerank"):
            raise ConfigError(f"filter_mode must be remove or rerank, got {self.filter_mode!r}")

    @classmethod
    def from_text(cls, text: str, **overrides) -> "PipelineConfig":
        values = parse_config_values(text, cls)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


# ---------------------------------------------------------------------------
# model bundle: grasp network plus optional concept layer in one checkpoint
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    net: GraspNet
    concepts: C.ConceptLayer | None = None

    def save(self, path) -> None:
        extra, extra_cfg = {}, ""
        if self.concepts is not None:
            extra, extra_cfg = self.concepts.state_dict(), self.concepts.config_text()
        self.net.save(path, extra, extra_cfg)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        path = Path(path)
        cfg_text = Path(str(path) + ".cfg").read_text()
        cfg = GgcnnConfig.from_text(cfg_text)
        state = T.load_checkpoint(path)
        net = GraspNet(cfg)
        net.load_state_dict({k: v for k, v in state.items() if not k.startswith("concept.")})
        layer = None
        if "concept.projection" in state:
            meta = dict(line.split("=", 1) for line in cfg_text.splitlines() if line.startswith("concept."))
            layer = C.ConceptLayer(
                net,
                int(meta["concept.n_features"]),
                int(meta["concept.seed"]),
                int(meta["concept.n_classes"]),
                meta["concept.feature_names"].split(","),
            )
            layer.load_state_dict(state)
        return cls(net, layer)


# ---------------------------------------------------------------------------
# scene sources
# ---------------------------------------------------------------------------

def parse_generator(text: str) -> dict:
    """``synth:seed=7,tools=2,classes=3+5,size=160`` -> keyword arguments."""
    body = text.split(":", 1)[1] if ":" in text else ""
    out = {"seed": 0, "tools": 1, "classes": None, "size": 160}
    for item in filter(None, (s.strip() for s in body.split(","))):
        if "=" not in item:
            raise ConfigError(f"generator item {item!r} is not key=value")
        key, value = item.split("=", 1)
        if key not in out:
            raise ConfigError(f"unknown generator key {key!r}")
        try:
            out[key] = [int(c) for c in value.split("+")] if key == "classes" else int(value)
        except ValueError:
            raise ConfigError(f"bad generator value {item!r}") from None
    return out


def load_scenes(source: str) -> list[tuple[str, SceneRecord]]:
    """Scenes named by a generator string, a manifest directory or a ``.depth.pgm`` file."""
    if source.startswith("synth"):
        g = parse_generator(source)
        scene = random_scene(g["tools"], g["size"], g["size"], seed=g["seed"], classes=g["classes"])
        return [(f"synth{g['seed']:05d}", scene)]
    path = Path(source)
    if path.is_dir() or path.name == "index.txt":
        out = []
        for depth, boxes, grasps in read_manifest(path):
            out.append((depth.name.replace(".depth.pgm", ""), read_scene(depth, boxes, grasps)))
        return out
    if not path.name.endswith(".depth.pgm"):
        raise ConfigError(f"scene {source!r} is neither a generator string, a manifest nor a .depth.pgm file")
    stem = str(path)[: -len(".depth.pgm")]
    boxes, grasps = Path(stem + ".boxes.txt"), Path(stem + ".grasps.txt")
    if boxes.exists() and grasps.exists():
        return [(path.name[: -len(".depth.pgm")], read_scene(path, boxes, grasps))]
    return [(path.name[: -len(".depth.pgm")], SceneRecord(read_depth(path), [], [], -1))]


# ---------------------------------------------------------------------------
# drawing
# ---------------------------------------------------------------------------

def depth_to_rgb(depth: np.ndarray) -> np.ndarray:
    """Grey image with nearer (taller) surfaces brighter."""
    d = np.asarray(depth, dtype=float)
    lo, hi = d.min(), d.max()
    g = np.zeros_like(d) if hi <= lo else (hi - d) / (hi - lo)
    return np.repeat(np.rint(g * 200 + 30).astype(np.uint8)[..., None], 3, axis=2)


def draw_polygon(img: np.ndarray, corners: np.ndarray, color) -> None:
    rr, cc = draw.polygon_perimeter(corners[:, 1], corners[:, 0], shape=img.shape[:2], clip=False)
    img[rr, cc] = color


def draw_box(img: np.ndarray, det: Detection, color=(0, 220, 0)) -> None:
    h, w = img.shape[:2]
    x0, y0, x1, y1 = det.bbox.to_pixels(w, h)
    corners = np.array([[x0, y0], [x1 - 1, y0], [x1 - 1, y1 - 1], [x0, y1 - 1]], dtype=float)
    draw_polygon(img, corners, color)


def draw_grasp(img: np.ndarray, g: GraspRect, color) -> None:
    draw_polygon(img, np.rint(rect_corners(g)), color)
    rr, cc = draw.disk((g.y, g.x), 1.5, shape=img.shape[:2])
    img[rr, cc] = color


def quality_to_rgb(q: np.ndarray) -> np.ndarray:
    """Black through red to yellow."""
    q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
    rgb = np.stack([np.minimum(1.0, 2 * q), np.clip(2 * q - 1, 0.0, 1.0), np.zeros_like(q)], axis=-1)
    return np.rint(rgb * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# report helpers
# ---------------------------------------------------------------------------

def _grasp_dict(g: GraspRect, score: float | None = None) -> dict:
    d = {"x": g.x, "y": g.y, "w": g.w, "h": g.h, "theta": g.theta}
    if score is not None:
        d["score"] = score
    return d


def _box_dict(b: OrientedBox) -> dict:
    return {"cx": b.cx, "cy": b.cy, "length": b.length, "width": b.width, "heading": b.heading}


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


class StageFailure(RuntimeError):
    def __init__(self, stage: str, error: Exception):
        super().__init__(f"{stage}: {error}")
        self.stage, self.error = stage, error


@dataclass
class RunResult:
    report: dict
    timing: dict
    exit_code: int
    artifacts: list[str] = field(default_factory=list)


def _timed(timing: dict, key: str, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    finally:
        timing[key] = round((time.perf_counter() - start) * 1000.0, 3)


def run_scene(
    name: str,
    scene: SceneRecord,
    bundle: ModelBundle,
    rules: Sequence[SafetyRule],
    calib: CameraCalib,
    cfg: PipelineConfig = PipelineConfig(),
    out_dir=None,
    seed: int = 0,
    detector: DetectorConfig = DetectorConfig(),
    planner_cfg: PlannerConfig = PlannerConfig(),
    limits: JointLimits = JointLimits(),
) -> RunResult:
    """Process one scene; artifacts are written to ``out_dir`` when given."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    timing: dict = {"objects": []}
    artifacts: list[str] = []
    report = {"scene": name, "seed": seed, "status": "ok", "objects": [], "artifacts": artifacts}
    worker = math.radians(cfg.worker_direction_deg)
    h, w = scene.shape
    overlay = depth_to_rgb(scene.depth)

    try:
        dets = _timed(timing, "detect_ms", baseline_detect, scene.depth, detector)
    except Exception as exc:  # detection is the first stage; nothing to salvage
        if cfg.strict:
            raise StageFailure("detect", exc) from exc
        report["status"] = "failed"
        report["error"] = {"stage": "detect", "message": str(exc)}
        return RunResult(report, timing, EXIT_STAGE, artifacts)
    report["n_objects"] = len(dets)

    exit_code = EXIT_OK
    for i, det in enumerate(dets):
        obj_time: dict = {}
        timing["objects"].append(obj_time)
        obj = {
            "index": i,
            "detection": {
                "class_id": det.class_id,
                "class_name": CLASS_NAMES[det.class_id],
                "confidence": det.confidence,
                "bbox": [det.bbox.cx, det.bbox.cy, det.bbox.bw, det.bbox.bh],
            },
            "footprint": _box_dict(det.footprint),
            "status": "ok",
        }
        report["objects"].append(obj)
        draw_box(overlay, det)
        stage = "crop"
        try:
            window = crop_window(det.bbox, h, w, cfg.crop_size, cfg.crop_pad)
            crop = _timed(obj_time, "crop_ms", crop_plane, scene.depth, window, float(np.median(scene.depth)))
            stage = "grasp"
            x = prepare_input(crop, None, bundle.net.cfg.in_channels)
            maps = _timed(obj_time, "grasp_ms", bundle.net.forward, x)
            ranked = [(window.to_scene(g), s) for g, s in decode_grasps(maps, cfg.k, cfg.smoothing_sigma)]
            obj["grasps"] = [_grasp_dict(g, s) for g, s in ranked]
            if out is not None:
                qpath = f"{name}.obj{i}.quality.ppm"
                write_ppm(out / qpath, quality_to_rgb(maps.quality))
                artifacts.append(qpath)
            stage = "concepts"
            if bundle.concepts is not None:
                activations = _timed(obj_time, "concepts_ms", bundle.concepts.extract, x)
                active_rules = list(rules)
            else:
                activations = np.zeros(0)
                active_rules = [r for r in rules if r.trigger_kind == "class"]
            obj["concepts"] = [float(v) for v in activations]
            stage = "rules"
            actions = _timed(obj_time, "rules_ms", evaluate_rules, activations, det.class_id, active_rules, det.confidence)
            obj["triggered"] = [a.describe() for a in actions]
            stage = "filter"
            safe = _timed(obj_time, "filter_ms", filter_grasps, ranked, det.footprint, actions, cfg.filter_mode)
            obj["safe_grasps"] = [_grasp_dict(g, s) for g, s in safe]
            for g, _ in ranked:
                draw_grasp(overlay, g, (230, 230, 0) if any(g is s[0] for s in safe) else (200, 0, 200))
            if not safe:
                obj["status"] = "rejected"
                if exit_code == EXIT_OK:
                    exit_code = EXIT_SAFETY
                continue
            chosen, _ = safe[0]
            draw_grasp(overlay, chosen, (255, 40, 40))
            stage = "handover"
            pose = _timed(obj_time, "handover_ms", refine_handover, chosen, det.footprint.heading, rotation_action(actions), worker)
            obj["handover"] = {"grasp": _grasp_dict(pose.grasp), "approach_heading": pose.approach_heading, "rotation": pose.rotation, "safe": pose.safe}
            stage = "plan"
            t0 = time.perf_counter()
            position, yaw = grasp_to_pose(chosen, calib, planner_cfg.workspace)
            setpoints = plan_task(position, yaw, pose, planner_cfg, calib.yaw)
            traj = plan_trajectory(setpoints, limits=limits, dt=cfg.dt)
            obj_time["plan_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            obj["setpoints"] = format_setpoints(setpoints).splitlines()[1:]
            obj["trajectory"] = {"samples": len(traj), "duration": float(traj.times[-1])}
            if out is not None:
                tpath = f"{name}.obj{i}.traj.txt"
                (out / tpath).write_text(traj.to_text())
                artifacts.append(tpath)
                obj["trajectory"]["file"] = tpath
        except Exception as exc:
            if cfg.strict:
                raise StageFailure(stage, exc) from exc
            log.warning("%s object %d: %s stage failed: %s", name, i, stage, exc)
            obj["status"] = "failed"
            obj["error"] = {"stage": stage, "message": f"{type(exc).__name__}: {exc}"}
            exit_code = EXIT_STAGE
    if out is not None:
        opath = f"{name}.overlay.ppm"
        write_ppm(out / opath, overlay)
        artifacts.append(opath)
    if exit_code != EXIT_OK:
        report["status"] = "failed" if exit_code == EXIT_STAGE else "rejected"
    return RunResult(report, timing, exit_code, artifacts)


def run(
    scenes: Sequence[tuple[str, SceneRecord]],
    bundle: ModelBundle,
    rules: Sequence[SafetyRule],
    calib: CameraCalib,
    cfg: PipelineConfig = PipelineConfig(),
    out_dir=None,
    seed: int = 0,
    config_snapshot: dict | None = None,
) -> tuple[dict, dict, int]:
    """Run every scene in order; returns (report, timing, exit code)."""
    results = []
    for name, scene in scenes:
        results.append(run_scene(name, scene, bundle, rules, calib, cfg, out_dir, seed))
    codes = [r.exit_code for r in results]
    exit_code = EXIT_STAGE if EXIT_STAGE in codes else EXIT_SAFETY if EXIT_SAFETY in codes else EXIT_OK
    report = {
        "seed": seed,
        "config": config_snapshot if config_snapshot is not None else asdict(cfg),
        "exit_code": exit_code,
        "scenes": [r.report for r in results],
    }
    timing = {"scenes": [{"scene": r.report["scene"], **r.timing} for r in results]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(canonical_json(report))
        (out / "timing.json").write_text(canonical_json(timing))
    return report, timing, exit_code


# ---------------------------------------------------------------------------
# grasp evaluation
# ---------------------------------------------------------------------------

@dataclass
class GraspEvalResult:
    successes: int
    attempts: int
    per_class: dict  # class name -> (successes, attempts)

    @property
    def rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0

    def summary(self) -> str:
        lines = [f"success: {self.successes}/{self.attempts} = {format_percent(self.successes, self.attempts)}"]
        for name, (s, n) in self.per_class.items():
            lines.append(f"  {name}: {s}/{n} = {format_percent(s, n)}")
        return "\n".join(lines)


def format_percent(successes: int, attempts: int) -> str:
    return f"{100.0 * successes / attempts:.1f}%" if attempts else "n/a"


def oracle_maps(gts: Sequence[GraspRect], height: int, width: int) -> GraspMaps:
    """A perfect model: the training targets themselves."""
    return encode_targets(gts, height, width)


def evaluate_grasps(
    scenes: Sequence[tuple[str, SceneRecord]],
    net: GraspNet | None,
    iou_min: float = 0.25,
    angle_max: float = math.radians(30),
    crop_size: int = 96,
    crop_pad: int = 8,
    oracle: bool = False,
) -> GraspEvalResult:
    """Top-1 grasp per ground-truth object, cropped from its ground-truth box.

    With ``oracle`` the network is replaced by the objects' own target maps
    decoded without smoothing.
    """
    per_class = {name: [0, 0] for name in CLASS_NAMES}
    ok = n = 0
    for _, scene in scenes:
        for i, box in enumerate(scene.boxes):
            depth, window, gts = object_crop(scene, i, crop_size, crop_pad)
            if oracle:
                (g, _), = decode_grasps(oracle_maps(gts, crop_size, crop_size), 1, 0.0)
            else:
                (g, _), = decode_grasps(net.forward(prepare_input(depth, None, net.cfg.in_channels)), 1, net.cfg.smoothing_sigma)
            hit = bool(match_any(g, gts, iou_min, angle_max))
            ok += hit
            n += 1
            per_class[CLASS_NAMES[box.class_id]][0] += hit
            per_class[CLASS_NAMES[box.class_id]][1] += 1
    return GraspEvalResult(ok, n, {k: tuple(v) for k, v in per_class.items() if v[1]})
