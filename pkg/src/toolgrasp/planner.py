"""Task planning from a chosen grasp, and joint trajectories with trapezoidal timing.

Frames: image pixels (x = column, y = row) lie on the table plane of the
camera frame; ``CameraCalib`` maps them into the robot base frame (metres).
The default arm is planar with three revolute joints plus a prismatic
vertical joint, so joint vectors are ``(q1, q2, q3, z)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import GraspRect, wrap_angle
from .safety import HandoverPose

DEFAULT_DT = 0.008


class PlanningError(RuntimeError):
    pass


class WorkspaceError(PlanningError):
    pass


class ReachabilityError(PlanningError):
    pass


class SafetyError(PlanningError):
    pass


def wrap_full(a: float) -> float:
    """Wrap to [-pi, pi)."""
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w < 0:
        w += 2 * math.pi
    w -= math.pi
    return -math.pi if w >= math.pi else w


# ---------------------------------------------------------------------------
# calibration and workspace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Workspace:
    lo: tuple[float, float, float] = (-0.9, -0.9, -0.05)
    hi: tuple[float, float, float] = (0.9, 0.9, 0.8)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= np.array(self.lo)) and np.all(p <= np.array(self.hi)))


@dataclass(frozen=True)
class CameraCalib:
    """Camera-to-base transform plus table-plane pixel scale."""

    transform: np.ndarray  # 4x4 homogeneous
    scale: float  # metres per pixel on the table plane
    table_height: float

    def __post_init__(self):
        m = np.asarray(self.transform, dtype=float)
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise ValueError("transform must be a finite 4x4 matrix")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("transform bottom row must be 0 0 0 1")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation block must be orthonormal with determinant +1")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive")
        if not math.isfinite(self.table_height):
            raise ValueError("table height must be finite")
        object.__setattr__(self, "transform", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.transform[:3, 3]

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    @classmethod
    def identity(cls, scale: float = 0.001, table_height: float = 0.0) -> "CameraCalib":
        return cls(np.eye(4), scale, table_height)

    @classmethod
    def default(cls) -> "CameraCalib":
        """A 160-pixel scene at 2 mm/px, centred 0.45 m in front of the base."""
        m = np.eye(4)
        m[:3, 3] = (0.29, -0.16, 0.0)
        return cls(m, 0.002, 0.0)

    def to_text(self) -> str:
        rows = [" ".join(repr(float(v)) for v in row) for row in self.transform[:3]]
        return "# camera->base 3x4 (row-major), metres per pixel, table height\n" + "\n".join(rows) + f"\n{self.scale!r}\n{self.table_height!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "CameraCalib":
        values = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0]
            try:
                values += [float(v) for v in line.split()]
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        if len(values) != 14:
            raise ValueError(f"calibration needs 14 numbers, got {len(values)}")
        m = np.eye(4)
        m[:3] = np.array(values[:12]).reshape(3, 4)
        return cls(m, values[12], values[13])

    @classmethod
    def load(cls, path) -> "CameraCalib":
        return cls.from_text(Path(path).read_text())


def grasp_to_pose(g: GraspRect, calib: CameraCalib, workspace: Workspace = Workspace()) -> tuple[np.ndarray, float]:
    """Base-frame grasp point on the table and gripper yaw (pi-periodic, wrapped)."""
    p_cam = np.array([g.x * calib.scale, g.y * calib.scale, 0.0])
    position = calib.rotation @ p_cam + calib.translation + np.array([0.0, 0.0, calib.table_height])
    if not workspace.contains(position):
        raise WorkspaceError(f"grasp at pixel ({g.x:.1f}, {g.y:.1f}) maps to {np.round(position, 4).tolist()}, outside the workspace")
    return position, wrap_angle(g.theta + calib.yaw)


def pose_to_pixel(position, calib: CameraCalib) -> tuple[float, float]:
    """Inverse of the planar part of :func:`grasp_to_pose`."""
    p = np.asarray(position, dtype=float) - calib.translation - np.array([0.0, 0.0, calib.table_height])
    p_cam = calib.rotation.T @ p
    return float(p_cam[0] / calib.scale), float(p_cam[1] / calib.scale)


# ---------------------------------------------------------------------------
# task planning
# ---------------------------------------------------------------------------

class Gripper(enum.Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass(frozen=True)
class Setpoint:
    label: str
    position: tuple[float, float, float]
    yaw: float
    gripper: Gripper
    dwell: float = 0.0
    hazard_heading: float | None = None  # base-frame direction of the tool's hazard axis

    def __post_init__(self):
        if self.dwell < 0:
            raise ValueError("dwell must be >= 0")

    def to_text(self) -> str:
        x, y, z = self.position
        hz = "-" if self.hazard_heading is None else f"{self.hazard_heading:.9f}"
        return f"{self.label} {x:.9f} {y:.9f} {z:.9f} {self.yaw:.9f} {self.gripper.value} {self.dwell:.9f} {hz}"


@dataclass(frozen=True)
class PlannerConfig:
    clearance: float = 0.10
    lift: float = 0.15
    grasp_dwell: float = 0.5
    release_dwell: float = 0.5
    handover_position: tuple[float, float, float] = (0.0, 0.55, 0.30)
    workspace: Workspace = Workspace()


SETPOINT_ORDER = ("pre_grasp", "grasp", "lift", "handover", "release")


def plan_task(position, yaw: float, handover: HandoverPose, cfg: PlannerConfig = PlannerConfig(), camera_yaw: float = 0.0) -> list[Setpoint]:
    """Pre-grasp, grasp, lift, handover and release setpoints.

    At handover the gripper turns by the rotation recorded in ``handover``,
    so the tool's hazard axis points along ``approach_heading`` (image frame,
    mapped to the base frame by ``camera_yaw``).
    """
    if not handover.safe:
        raise SafetyError("handover pose is not marked safe")
    p = np.asarray(position, dtype=float)
    up = np.array([0.0, 0.0, 1.0])
    hand_yaw = wrap_full(yaw + handover.rotation)
    hazard = wrap_full(handover.approach_heading + camera_yaw)
    hp = tuple(float(v) for v in cfg.handover_position)
    out = [
        Setpoint("pre_grasp", tuple(p + cfg.clearance * up), yaw, Gripper.OPEN),
        Setpoint("grasp", tuple(p), yaw, Gripper.CLOSED, cfg.grasp_dwell),
        Setpoint("lift", tuple(p + cfg.lift * up), yaw, Gripper.CLOSED),
        Setpoint("handover", hp, hand_yaw, Gripper.CLOSED, 0.0, hazard),
        Setpoint("release", hp, hand_yaw, Gripper.OPEN, cfg.release_dwell, hazard),
    ]
    for sp in out:
        if not cfg.workspace.contains(sp.position):
            raise WorkspaceError(f"{sp.label} setpoint {np.round(sp.position, 4).tolist()} is outside the workspace")
    return out


def format_setpoints(setpoints: Sequence[Setpoint]) -> str:
    header = "# label x y z yaw gripper dwell hazard_heading"
    return "\n".join([header] + [sp.to_text() for sp in setpoints]) + "\n"


# ---------------------------------------------------------------------------
# 1-D profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrapezoidProfile:
    distance: float
    v_peak: float
    a_max: float
    t_accel: float
    t_cruise: float

    @property
    def t_total(self) -> float:
        return 2 * self.t_accel + self.t_cruise

    def position(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.t_total)
        a, ta, tc, v = self.a_max, self.t_accel, self.t_cruise, self.v_peak
        d_acc = 0.5 * a * ta * ta
        rem = self.t_total - t
        return np.where(
            t <= ta, 0.5 * a * t * t,
            np.where(t <= ta + tc, d_acc + v * (t - ta), self.distance - 0.5 * a * rem * rem),
        )

    def velocity(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.t_total)
        a, ta, tc = self.a_max, self.t_accel, self.t_cruise
        return np.where(t <= ta, a * t, np.where(t <= ta + tc, self.v_peak, a * (self.t_total - t)))


def trapezoid_profile(d: float, v_max: float, a_max: float) -> TrapezoidProfile:
    """Time-optimal rest-to-rest profile under velocity and acceleration bounds."""
    if not (v_max > 0 and a_max > 0):
        raise ValueError("v_max and a_max must be positive")
    if d < 0 or not math.isfinite(d):
        raise ValueError(f"distance must be finite and >= 0, got {d}")
    if d == 0:
        return TrapezoidProfile(0.0, 0.0, a_max, 0.0, 0.0)
    if d >= v_max * v_max / a_max:
        return TrapezoidProfile(d, v_max, a_max, v_max / a_max, d / v_max - v_max / a_max)
    v_peak = math.sqrt(d * a_max)
    return TrapezoidProfile(d, v_peak, a_max, v_peak / a_max, 0.0)


# ---------------------------------------------------------------------------
# arm model and joint trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanarArm:
    """Three revolute joints in the table plane plus a prismatic vertical joint."""

    links: tuple[float, float, float] = (0.425, 0.392, 0.10)
    z_range: tuple[float, float] = (-0.05, 0.8)
    revolute: tuple[bool, ...] = (True, True, True, False)

    def fk(self, q) -> tuple[np.ndarray, float]:
        q1, q2, q3, z = q
        l1, l2, l3 = self.links
        a1, a2, a3 = q1, q1 + q2, q1 + q2 + q3
        x = l1 * math.cos(a1) + l2 * math.cos(a2) + l3 * math.cos(a3)
        y = l1 * math.sin(a1) + l2 * math.sin(a2) + l3 * math.sin(a3)
        return np.array([x, y, z]), wrap_full(a3)

    def ik(self, position, yaw: float, q_ref=None) -> np.ndarray:
        """Elbow-positive solution; revolute joints unwrapped towards ``q_ref``."""
        x, y, z = (float(v) for v in position)
        if not self.z_range[0] <= z <= self.z_range[1]:
            raise ReachabilityError(f"height {z:.4f} outside prismatic range {self.z_range}")
        l1, l2, l3 = self.links
        wx, wy = x - l3 * math.cos(yaw), y - l3 * math.sin(yaw)
        c2 = (wx * wx + wy * wy - l1 * l1 - l2 * l2) / (2 * l1 * l2)
        if c2 > 1.0 + 1e-12 or c2 < -1.0 - 1e-12:
            raise ReachabilityError(f"wrist point ({wx:.4f}, {wy:.4f}) out of reach")
        q2 = math.acos(min(1.0, max(-1.0, c2)))
        q1 = math.atan2(wy, wx) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
        q3 = yaw - q1 - q2
        q = np.array([q1, q2, q3, z])
        if q_ref is not None:
            for j, rev in enumerate(self.revolute):
                if rev:
                    q[j] += 2 * math.pi * round((q_ref[j] - q[j]) / (2 * math.pi))
        return q


@dataclass(frozen=True)
class JointLimits:
    v_max: tuple[float, ...] = (1.0, 1.0, 1.5, 0.5)
    a_max: tuple[float, ...] = (2.0, 2.0, 3.0, 1.0)

    def __post_init__(self):
        if len(self.v_max) != len(self.a_max):
            raise ValueError("v_max and a_max need one entry per joint")
        if min(self.v_max) <= 0 or min(self.a_max) <= 0:
            raise ValueError("limits must be positive")


@dataclass
class JointTrajectory:
    times: np.ndarray  # (N,)
    q_d: np.ndarray  # (N, J)
    qd_d: np.ndarray  # (N, J)
    labels: list[str] = field(default_factory=list)  # setpoint reached at each segment end

    def __len__(self) -> int:
        return len(self.times)

    def to_text(self) -> str:
        lines = []
        for t, q, qd in zip(self.times, self.q_d, self.qd_d):
            lines.append(" ".join(f"{v:.9f}" for v in (t, *q, *qd)))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str, n_joints: int) -> "JointTrajectory":
        rows = [[float(v) for v in line.split()] for line in text.splitlines() if line.strip()]
        data = np.array(rows, dtype=float).reshape(len(rows), 1 + 2 * n_joints)
        return cls(data[:, 0], data[:, 1 : 1 + n_joints], data[:, 1 + n_joints :])


def _segment(q0: np.ndarray, q1: np.ndarray, limits: JointLimits, dt: float):
    """Samples after t=0 of the synchronized straight-line move q0 -> q1."""
    delta = q1 - q0
    span = np.abs(delta)
    moving = span > 0
    if not moving.any():
        return np.zeros(0), np.zeros((0, len(q0))), np.zeros((0, len(q0)))
    v = np.asarray(limits.v_max)[moving] / span[moving]
    a = np.asarray(limits.a_max)[moving] / span[moving]
    # path variable s in [0, 1]; bounding s' and s'' keeps every joint in its limits
    prof = trapezoid_profile(1.0, float(v.min()), float(a.min()))
    n = int(math.ceil(prof.t_total / dt - 1e-9))
    t = np.minimum(np.arange(1, n + 1) * dt, prof.t_total)
    s = prof.position(t)
    sd = prof.velocity(t)
    s[-1], sd[-1] = 1.0, 0.0
    return t, q0 + s[:, None] * delta, sd[:, None] * delta


def plan_trajectory(
    setpoints: Sequence[Setpoint],
    ik: Callable | None = None,
    limits: JointLimits = JointLimits(),
    dt: float = DEFAULT_DT,
    q_start=None,
) -> JointTrajectory:
    """Joint-space straight lines between IK solutions, trapezoid-timed and sampled every ``dt``.

    Dwell times are held as zero-velocity samples.  ``ik(position, yaw,
    q_ref)`` defaults to :class:`PlanarArm`.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    ik = ik or PlanarArm().ik
    n_joints = len(limits.v_max)
    if not setpoints:
        return JointTrajectory(np.zeros(0), np.zeros((0, n_joints)), np.zeros((0, n_joints)))
    goals = []
    q_ref = None if q_start is None else np.asarray(q_start, dtype=float)
    for i, sp in enumerate(setpoints):
        try:
            q = np.asarray(ik(sp.position, sp.yaw, q_ref), dtype=float)
        except ReachabilityError as exc:
            raise ReachabilityError(f"setpoint {i} ({sp.label}): {exc}") from None
        if q.shape != (n_joints,):
            raise ValueError(f"ik returned {q.shape}, limits describe {n_joints} joints")
        goals.append(q)
        q_ref = q
    current = goals[0] if q_start is None else np.asarray(q_start, dtype=float)
    times, qs, qds = [np.zeros(1)], [current[None, :]], [np.zeros((1, n_joints))]
    t_now = 0.0
    labels = []
    for sp, goal in zip(setpoints, goals):
        t, q, qd = _segment(current, goal, limits, dt)
        if len(t):
            times.append(t_now + t)
            qs.append(q)
            qds.append(qd)
            t_now += t[-1]
        if sp.dwell > 0:
            n = int(math.ceil(sp.dwell / dt - 1e-9))
            hold = t_now + np.minimum(np.arange(1, n + 1) * dt, sp.dwell)
            times.append(hold)
            qs.append(np.repeat(goal[None, :], n, axis=0))
            qds.append(np.zeros((n, n_joints)))
            t_now = hold[-1]
        labels.append(sp.label)
        current = goal
    return JointTrajectory(np.concatenate(times), np.concatenate(qs), np.concatenate(qds), labels)


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------

@dataclass
class TrackingLog:
    times: np.ndarray
    q: np.ndarray
    error: np.ndarray  # q_d - q per sample

    def __len__(self) -> int:
        return len(self.times)


def simulate_tracking(traj: JointTrajectory, gain: float, q0=None) -> TrackingLog:
    """First-order tracking ``q' = qd_d + gain (q_d - q)``.

    Between samples the reference position is linear and the feed-forward
    velocity is held, so the error obeys ``e' = r - gain e`` with constant
    ``r``; that is integrated exactly.
    """
    if not gain > 0:
        raise ValueError("gain must be positive")
    n = len(traj)
    if n == 0:
        return TrackingLog(np.zeros(0), np.zeros((0, traj.q_d.shape[1])), np.zeros((0, traj.q_d.shape[1])))
    e = np.zeros_like(traj.q_d)
    e[0] = traj.q_d[0] - (traj.q_d[0] if q0 is None else np.asarray(q0, dtype=float))
    for k in range(n - 1):
        h = traj.times[k + 1] - traj.times[k]
        decay = math.exp(-gain * h)
        r = (traj.q_d[k + 1] - traj.q_d[k]) / h - traj.qd_d[k]
        e[k + 1] = e[k] * decay + r * (1.0 - decay) / gain
    return TrackingLog(traj.times.copy(), traj.q_d - e, e)
