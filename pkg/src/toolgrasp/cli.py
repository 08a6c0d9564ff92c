"""Command-line entry point: ``toolgrasp <subcommand> [flags]``.

Exit codes: 0 success, 2 parse/config error, 3 stage failure, 4 safety
rejection with no fallback grasp.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import concepts as C
from .dataset import CLASS_NAMES, ParseError, object_crop, random_scene, write_manifest, write_scene
from .detection import DetectorConfig, baseline_detect, compute_map
from .ggcnn import ConfigError, GgcnnConfig, parse_config_values, prepare_input, train
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_STAGE,
    ModelBundle,
    PipelineConfig,
    StageFailure,
    evaluate_grasps,
    load_scenes,
    run,
)
from .planner import CameraCalib
from .safety import SafetyConfigError, default_rules, load_rules
from .tensor import CheckpointError, GradientError

log = logging.getLogger("toolgrasp")

DEFAULT_CONCEPT_FEATURES = 12


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolgrasp", description="Tool detection, grasp estimation and safe handover planning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline on a scene")
    _common(p)
    p.add_argument("--scene", required=True, help="manifest directory, .depth.pgm file or synth:seed=N,tools=K,classes=a+b")
    p.add_argument("--model", required=True)
    p.add_argument("--rules", help="rules file (default: built-in rules)")
    p.add_argument("--calib", help="calibration file (default: built-in)")
    p.add_argument("--k", type=int)
    p.add_argument("--strict", action="store_true", help="stop at the first stage failure")

    p = sub.add_parser("synth", help="write seeded synthetic scenes")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--tools", type=int, help="tools per scene (default 1-3 at random)")
    p.add_argument("--size", type=int)

    p = sub.add_parser("train", help="fit the grasp network and concept layer")
    _common(p)
    p.add_argument("--scene", help="training manifest (default: --n synthetic single-tool scenes)")
    p.add_argument("--n", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--concept-features", type=int)

    p = sub.add_parser("eval-detect", help="mAP and confusion matrix of the baseline detector")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--iou-min", type=float)

    p = sub.add_parser("eval-grasp", help="top-1 grasp success rate")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model")
    p.add_argument("--oracle", action="store_true", help="use ground-truth target maps instead of a model")
    p.add_argument("--iou-min", type=float)
    p.add_argument("--angle-max", type=float, help="degrees")

    p = sub.add_parser("explain", help="feature-class correlation heatmap")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True)
    return parser


def _settings(args, **defaults) -> dict:
    """Config file values overridden by explicit flags."""
    text = Path(args.config).read_text() if args.config else ""
    values = dict(defaults)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{args.config}: line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in values and values[key] is not None and not isinstance(values[key], str):
            try:
                value = type(values[key])(value)
            except ValueError:
                raise ConfigError(f"{args.config}: line {lineno}: bad value for {key}") from None
        values[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            values[key] = flag
    values["_text"] = text
    return values


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    s = _settings(args, n=10, seed=0, tools=0, size=160)
    out = _out_dir(args, "scenes")
    rng = np.random.default_rng(s["seed"])
    entries = []
    for i in range(s["n"]):
        n_tools = s["tools"] or int(rng.integers(1, 4))
        scene = random_scene(n_tools, s["size"], s["size"], seed=s["seed"] * 100003 + i)
        entries.append(write_scene(out, f"scene{i:04d}", scene))
    write_manifest(out, entries)
    print(f"wrote {len(entries)} scenes to {out}")
    return EXIT_OK


def _training_scenes(args, s):
    if args.scene:
        return load_scenes(args.scene)
    return [(f"train{i}", random_scene(1, 160, 160, seed=s["seed"] * 100003 + 1000 + i)) for i in range(s["n"])]


def cmd_train(args) -> int:
    s = _settings(args, n=200, seed=0, epochs=None, lr=None, concept_features=DEFAULT_CONCEPT_FEATURES, concept_epochs=300, concept_lr=0.02)
    values = parse_config_values(s["_text"], GgcnnConfig, "ggcnn.")
    values["seed"] = s["seed"]
    if s["epochs"] is not None:
        values["epochs"] = int(s["epochs"])
    if s["lr"] is not None:
        values["lr"] = float(s["lr"])
    cfg = GgcnnConfig(**values)
    scenes = _training_scenes(args, s)
    crops = []
    for _, scene in scenes:
        for i, box in enumerate(scene.boxes):
            depth, _, gts = object_crop(scene, i)
            crops.append((depth, gts, box.class_id))
    if not crops:
        raise ConfigError("no training objects found")
    print(f"training grasp network on {len(crops)} objects for {cfg.epochs} epochs")
    net, history = train([(d, g) for d, g, _ in crops], cfg)
    labelled = [(prepare_input(d), c) for d, _, c in crops]
    layer = C.attach(net, int(s["concept_features"]), s["seed"])
    concept_history = C.finetune_concepts(layer, labelled, int(s["concept_epochs"]), float(s["concept_lr"]))
    out = _out_dir(args, "model")
    ModelBundle(net, layer).save(out / "model.glt")
    (out / "history.txt").write_text(
        "".join(f"grasp {i} {v!r}\n" for i, v in enumerate(history))
        + "".join(f"concept {i} {v!r}\n" for i, v in enumerate(concept_history))
    )
    print(f"final grasp loss {history[-1]:.5f}, concept loss {concept_history[-1]:.5f}")
    print(f"saved {out / 'model.glt'}")
    return EXIT_OK


def cmd_run(args) -> int:
    s = _settings(args, seed=0)
    overrides = {"k": args.k, "strict": True if args.strict else None}
    cfg = PipelineConfig.from_text(s["_text"], **overrides)
    bundle = ModelBundle.load(args.model)
    rules = load_rules(args.rules) if args.rules else default_rules()
    calib = CameraCalib.load(args.calib) if args.calib else CameraCalib.default()
    scenes = load_scenes(args.scene)
    out = _out_dir(args, "run")
    snapshot = {
        "pipeline": asdict(cfg),
        "scene": args.scene,
        "model": Path(args.model).name,
        "rules": Path(args.rules).name if args.rules else "builtin",
        "calib": calib.to_text().splitlines()[1:],
    }
    try:
        report, _, code = run(scenes, bundle, rules, calib, cfg, out, s["seed"], snapshot)
    except StageFailure as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    n_obj = sum(len(sc["objects"]) for sc in report["scenes"])
    print(f"{len(report['scenes'])} scene(s), {n_obj} object(s), exit code {code}; report in {out / 'report.json'}")
    return code


def cmd_eval_detect(args) -> int:
    s = _settings(args, iou_min=0.5, seed=0)
    scenes = load_scenes(args.scene)
    dets = [baseline_detect(scene.depth, DetectorConfig()) for _, scene in scenes]
    gts = [scene.boxes for _, scene in scenes]
    report = compute_map(dets, gts, confusion_iou=float(s["iou_min"]))
    out = _out_dir(args, "eval")
    (out / "detect_report.json").write_text(report.to_text())
    print(f"mAP50 {report.map50:.4f}  mAP50-95 {report.map50_95:.4f}")
    print("confusion (rows = true class, last column = missed):")
    for name, row in zip(CLASS_NAMES, report.confusion):
        print(f"  {name:<12}" + " ".join(f"{int(v):4d}" for v in row))
    return EXIT_OK


def cmd_eval_grasp(args) -> int:
    s = _settings(args, iou_min=0.25, angle_max=30.0, seed=0)
    if not args.oracle and not args.model:
        raise ConfigError("eval-grasp needs --model or --oracle")
    net = None if args.oracle else ModelBundle.load(args.model).net
    scenes = load_scenes(args.scene)
    result = evaluate_grasps(scenes, net, float(s["iou_min"]), math.radians(float(s["angle_max"])), oracle=args.oracle)
    print(result.summary())
    if args.out_dir:
        (_out_dir(args, "eval") / "grasp_report.txt").write_text(result.summary() + "\n")
    return EXIT_OK


def cmd_explain(args) -> int:
    _settings(args, seed=0)
    bundle = ModelBundle.load(args.model)
    if bundle.concepts is None:
        raise ConfigError(f"{args.model} has no concept layer")
    data = []
    for _, scene in load_scenes(args.scene):
        for i, box in enumerate(scene.boxes):
            depth, _, _ = object_crop(scene, i)
            data.append((prepare_input(depth), box.class_id))
    matrix = C.compute_correlation(bundle.concepts, data)
    out = _out_dir(args, "explain")
    ppm, txt = C.export_heatmap(matrix, out / "heatmap.ppm")
    print(f"wrote {ppm} and {txt}")
    print(C.similar_classes_summary(matrix))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval-detect": cmd_eval_detect,
    "eval-grasp": cmd_eval_grasp,
    "explain": cmd_explain,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParseError, SafetyConfigError, CheckpointError, C.ConceptError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GradientError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
