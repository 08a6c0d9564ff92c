"""Concept- and class-triggered safety rules, grasp filtering and handover refinement.

Rules file format, one rule per line (``#`` starts a comment)::

    rule_id; trigger_kind:value; threshold; action:params

``trigger_kind`` is ``concept`` (value = concept index, fires when the
activation is >= threshold) or ``class`` (value = class id, fires when the
detected class matches and the detection confidence is >= threshold).

Actions:

``reject:t0,t1[,s0,s1]``
    drop grasps whose centre lies in the slab ``t0 <= t <= t1`` of the tool's
    oriented box, where ``t`` runs from 0 at the base end to 1 at the
    hazardous end.  ``t0 <= 0`` and ``t1 >= 1`` extend the slab past the box
    ends.  The optional across-range is in box widths (centre line = 0); by
    default the slab is unbounded across.
``rotate:cone_deg``
    the hazard axis must point at least ``cone_deg`` away from the worker.
``none``
    record the trigger only.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import GraspRect, OrientedBox

WORKER_DIRECTION = math.pi / 2  # +y image axis
DEFAULT_CONE_DEG = 90.0


class SafetyConfigError(ValueError):
    pass


class ActionKind(enum.Enum):
    REJECT_REGION = "reject"
    REQUIRE_ROTATION = "rotate"
    NO_ACTION = "none"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    params: tuple[float, ...] = ()
    rule_id: str = ""

    def __post_init__(self):
        p = self.params
        if self.kind is ActionKind.REJECT_REGION:
            if len(p) not in (2, 4):
                raise SafetyConfigError("reject needs t0,t1 or t0,t1,s0,s1")
            if not all(math.isfinite(v) for v in p) or p[0] > p[1] or (len(p) == 4 and p[2] > p[3]):
                raise SafetyConfigError(f"reject ranges must be finite and ordered, got {p}")
        elif self.kind is ActionKind.REQUIRE_ROTATION:
            if len(p) != 1 or not math.isfinite(p[0]):
                raise SafetyConfigError("rotate needs one cone half-angle in degrees")
            if not 0.0 <= p[0] <= 180.0:
                raise SafetyConfigError(f"safe cone half-angle must lie in [0, 180] degrees, got {p[0]}")
        elif p:
            raise SafetyConfigError("none takes no parameters")

    @property
    def cone(self) -> float:
        """Safe-cone half-angle in radians (rotation actions only)."""
        return math.radians(self.params[0])

    def in_region(self, box: OrientedBox, px, py):
        """Boolean mask of points inside this action's rejected region."""
        t, s = box.local(np.asarray(px, dtype=float), np.asarray(py, dtype=float))
        t0, t1 = self.params[:2]
        inside = np.ones(np.shape(t), dtype=bool)
        if t0 > 0.0:
            inside &= t >= t0
        if t1 < 1.0:
            inside &= t <= t1
        if len(self.params) == 4:
            inside &= (s >= self.params[2]) & (s <= self.params[3])
        return inside

    def describe(self) -> str:
        if not self.params:
            return f"{self.rule_id}:{self.kind.name}"
        return f"{self.rule_id}:{self.kind.name}({','.join(repr(float(v)) for v in self.params)})"


@dataclass(frozen=True)
class SafetyRule:
    rule_id: str
    trigger_kind: str  # "concept" or "class"
    trigger_value: int
    threshold: float
    action: Action

    def __post_init__(self):
        if not self.rule_id or any(c.isspace() or c == ";" for c in self.rule_id):
            raise SafetyConfigError(f"bad rule id {self.rule_id!r}")
        if self.trigger_kind not in ("concept", "class"):
            raise SafetyConfigError(f"trigger kind must be concept or class, got {self.trigger_kind!r}")
        if self.trigger_value < 0:
            raise SafetyConfigError("trigger value must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise SafetyConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class HandoverPose:
    grasp: GraspRect
    approach_heading: float  # direction the hazard axis points at handover
    safe: bool
    rotation: float = 0.0  # applied change of heading, radians


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _parse_action(text: str, rule_id: str) -> Action:
    name, _, params = text.partition(":")
    try:
        kind = ActionKind(name.strip())
    except ValueError:
        raise SafetyConfigError(f"unknown action {name.strip()!r}") from None
    values = tuple(float(v) for v in params.split(",")) if params.strip() else ()
    return Action(kind, values, rule_id)


def parse_rules(text: str) -> list[SafetyRule]:
    rules = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(";")]
        if len(fields) != 4:
            raise SafetyConfigError(f"line {lineno}: expected 4 ';'-separated fields, got {len(fields)}")
        rule_id, trigger, threshold, action = fields
        try:
            kind, _, value = trigger.partition(":")
            rule = SafetyRule(rule_id, kind.strip(), int(value), float(threshold), _parse_action(action, rule_id))
        except (ValueError, SafetyConfigError) as exc:
            raise SafetyConfigError(f"line {lineno}: {exc}") from None
        if rule_id in seen:
            raise SafetyConfigError(f"line {lineno}: duplicate rule id {rule_id!r}")
        seen.add(rule_id)
        rules.append(rule)
    return rules


def format_rules(rules: Sequence[SafetyRule]) -> str:
    lines = []
    for r in rules:
        a = r.action
        params = ":" + ",".join(repr(float(v)) for v in a.params) if a.params else ""
        lines.append(f"{r.rule_id}; {r.trigger_kind}:{r.trigger_value}; {r.threshold!r}; {a.kind.value}{params}")
    return "\n".join(lines) + "\n"


def load_rules(path) -> list[SafetyRule]:
    return parse_rules(Path(path).read_text())


# Illustrative defaults.  Concept indices follow the class-tied concept
# order (3 = blade, 5 = shear_blades, 6 = tip); class ids follow CLASS_NAMES.
DEFAULT_RULES_TEXT = """\
# rule_id; trigger_kind:value; threshold; action:params
knife_blade_class; class:3; 0.5; reject:0.45,1.0
knife_blade_concept; concept:3; 0.6; reject:0.45,1.0
knife_handover; class:3; 0.5; rotate:90
scissor_blade_class; class:5; 0.5; reject:0.4,1.0
scissor_blade_concept; concept:5; 0.6; reject:0.4,1.0
screwdriver_tip; class:6; 0.5; rotate:90
"""


def default_rules() -> list[SafetyRule]:
    return parse_rules(DEFAULT_RULES_TEXT)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_rules(concepts: Sequence[float], class_id: int, rules: Sequence[SafetyRule], confidence: float = 1.0) -> list[Action]:
    """Actions of every triggered rule, ordered by rule id.

    Concept rules fire when ``concepts[value] >= threshold``; class rules
    fire when ``class_id == value`` and ``confidence >= threshold``.
    """
    concepts = np.asarray(concepts, dtype=float)
    fired = []
    for rule in sorted(rules, key=lambda r: r.rule_id):
        if rule.trigger_kind == "concept":
            if rule.trigger_value >= len(concepts):
                raise SafetyConfigError(
                    f"rule {rule.rule_id}: concept index {rule.trigger_value} out of range for {len(concepts)} concepts"
                )
            hit = concepts[rule.trigger_value] >= rule.threshold
        else:
            hit = class_id == rule.trigger_value and confidence >= rule.threshold
        if hit:
            fired.append(rule.action)
    return fired


def filter_grasps(candidates: Sequence, tool_box: OrientedBox, actions: Sequence[Action], mode: str = "remove") -> list:
    """Drop (or, with ``mode="rerank"``, demote) grasps centred in a rejected region.

    ``candidates`` holds GraspRects or (GraspRect, score) pairs; survivors keep
    their relative order.
    """
    if mode not in ("remove", "rerank"):
        raise SafetyConfigError(f"unknown filter mode {mode!r}")
    regions = [a for a in actions if a.kind is ActionKind.REJECT_REGION]
    if not regions:
        return list(candidates)
    keep, drop = [], []
    for cand in candidates:
        g = cand[0] if isinstance(cand, tuple) else cand
        bad = any(bool(a.in_region(tool_box, g.x, g.y)) for a in regions)
        (drop if bad else keep).append(cand)
    return keep + drop if mode == "rerank" else keep


def angular_distance(a: float, b: float) -> float:
    """Unsigned angle between two directions, in [0, pi]."""
    d = math.fmod(a - b, 2 * math.pi)
    d = abs(d)
    return min(d, 2 * math.pi - d)


def _wrap_pi(a: float) -> float:
    """Wrap to [-pi, pi)."""
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w < 0:
        w += 2 * math.pi
    w -= math.pi
    return -math.pi if w >= math.pi else w


def refine_handover(
    grasp: GraspRect,
    tool_heading: float,
    action: Action | None = None,
    worker_direction: float = WORKER_DIRECTION,
) -> HandoverPose:
    """Rotate the hazard axis out of the worker's safe cone by the smallest angle.

    With no rotation action the heading is kept.  When both edges of the cone
    are equally close the counter-clockwise rotation is taken.
    """
    if action is None or action.kind is not ActionKind.REQUIRE_ROTATION:
        return HandoverPose(grasp, _wrap_pi(tool_heading), True)
    cone = action.cone
    if cone > math.pi:
        raise SafetyConfigError("safe cone wider than 180 degrees cannot be satisfied")
    heading = _wrap_pi(tool_heading)
    if angular_distance(heading, worker_direction) >= cone:
        return HandoverPose(grasp, heading, True)
    offset = _wrap_pi(heading - worker_direction)  # signed, |offset| < cone
    ccw = cone - offset  # rotation reaching the cone edge counter-clockwise
    cw = -cone - offset
    delta = ccw if ccw <= -cw else cw
    new_heading = _wrap_pi(heading + delta)
    # floating-point wrap can land a hair inside the cone; push it out
    if angular_distance(new_heading, worker_direction) < cone:
        new_heading = _wrap_pi(worker_direction + math.copysign(cone, delta) if cone < math.pi else worker_direction + math.pi)
    return HandoverPose(grasp, new_heading, True, delta)


def rotation_action(actions: Sequence[Action]) -> Action | None:
    """Strictest (widest cone) rotation among triggered actions."""
    rot = [a for a in actions if a.kind is ActionKind.REQUIRE_ROTATION]
    return max(rot, key=lambda a: a.params[0]) if rot else None
