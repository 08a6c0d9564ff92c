import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toolgrasp.geometry import GraspRect
from toolgrasp.planner import (
    SETPOINT_ORDER,
    CameraCalib,
    Gripper,
    JointLimits,
    JointTrajectory,
    PlanarArm,
    PlannerConfig,
    ReachabilityError,
    SafetyError,
    Setpoint,
    WorkspaceError,
    format_setpoints,
    grasp_to_pose,
    plan_task,
    plan_trajectory,
    pose_to_pixel,
    simulate_tracking,
    trapezoid_profile,
)
from toolgrasp.safety import WORKER_DIRECTION, Action, ActionKind, HandoverPose, angular_distance, refine_handover


def rot_z(phi, t=(0.0, 0.0, 0.0)):
    m = np.eye(4)
    c, s = math.cos(phi), math.sin(phi)
    m[:2, :2] = [[c, -s], [s, c]]
    m[:3, 3] = t
    return m


def identity_joint_ik(position, yaw, q_ref=None):
    """Pass-through IK for tests that want to pick joint values directly."""
    return np.array([position[0], position[1], position[2], yaw])


def check_trajectory(traj, limits, dt):
    v = np.asarray(limits.v_max)
    a = np.asarray(limits.a_max)
    assert np.all(np.abs(traj.qd_d) <= v + 1e-9)
    assert not traj.qd_d[0].any() and not traj.qd_d[-1].any()
    assert np.all(np.diff(traj.times) > 0)
    steps = np.diff(traj.times)
    dq = np.diff(traj.q_d, axis=0)
    assert np.all(np.abs(dq) <= v * steps[:, None] + 1e-9)
    fd = dq / steps[:, None]
    # a sample's finite difference lies between neighbouring velocities, each within a_max * dt of it
    assert np.all(np.abs(fd - traj.qd_d[1:]) <= a * dt + 1e-9)


# calibration ---------------------------------------------------------------------

def test_identity_calib_scales():
    pos, yaw = grasp_to_pose(GraspRect(100, 200, 10, 5, 0.3), CameraCalib.identity(0.001, 0.02))
    assert np.allclose(pos, [0.1, 0.2, 0.02], atol=1e-15)
    assert yaw == pytest.approx(0.3)


def test_rotated_calib_swaps_axes():
    calib = CameraCalib(rot_z(math.pi / 2), 0.001, 0.0)
    pos, yaw = grasp_to_pose(GraspRect(100, 200, 10, 5, 0.0), calib)
    assert np.allclose(pos, [-0.2, 0.1, 0.0], atol=1e-12)
    assert yaw == pytest.approx(-math.pi / 2)  # pi/2 wraps to -pi/2 for a symmetric gripper


def test_out_of_workspace():
    with pytest.raises(WorkspaceError):
        grasp_to_pose(GraspRect(5000, 5000, 10, 5, 0.0), CameraCalib.identity())


def test_calib_validation_and_text_round_trip(tmp_path):
    bad = np.eye(4)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError):
        CameraCalib(bad, 0.001, 0.0)
    mirror = np.eye(4)
    mirror[0, 0] = -1
    with pytest.raises(ValueError):
        CameraCalib(mirror, 0.001, 0.0)
    calib = CameraCalib(rot_z(0.7, (0.1, -0.2, 0.03)), 0.0015, 0.01)
    path = tmp_path / "calib.txt"
    path.write_text(calib.to_text())
    back = CameraCalib.load(path)
    assert np.array_equal(back.transform, calib.transform)
    assert (back.scale, back.table_height) == (calib.scale, calib.table_height)
    with pytest.raises(ValueError, match="14"):
        CameraCalib.from_text("1 2 3\n")


@settings(max_examples=100)
@given(st.floats(0, 400), st.floats(0, 400), st.floats(-math.pi, math.pi), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_pixel_round_trip(px, py, phi, tx, ty):
    calib = CameraCalib(rot_z(phi, (tx, ty, 0.0)), 0.001, 0.0)
    pos, _ = grasp_to_pose(GraspRect(px, py, 10, 5, 0.0), calib)
    back = pose_to_pixel(pos, calib)
    assert abs(back[0] - px) < 1e-9 and abs(back[1] - py) < 1e-9


# task planning ------------------------------------------------------------------------

def _handover(heading=-math.pi / 2):
    return refine_handover(GraspRect(0, 0, 10, 5, 0.0), heading, Action(ActionKind.REQUIRE_ROTATION, (90.0,)))


def test_plan_task_skeleton():
    pos = np.array([0.4, 0.1, 0.0])
    sps = plan_task(pos, 0.2, _handover())
    assert tuple(sp.label for sp in sps) == SETPOINT_ORDER
    assert [sp.gripper for sp in sps] == [Gripper.OPEN, Gripper.CLOSED, Gripper.CLOSED, Gripper.CLOSED, Gripper.OPEN]
    assert sps[0].position[2] == pytest.approx(pos[2] + 0.10)
    assert sps[1].dwell == 0.5 and sps[4].dwell == 0.5
    assert plan_task(pos, 0.2, _handover()) == sps
    assert format_setpoints(sps).count("\n") == 6


def test_plan_task_rejects_unsafe_and_outside():
    unsafe = HandoverPose(GraspRect(0, 0, 10, 5, 0.0), 0.0, False)
    with pytest.raises(SafetyError):
        plan_task([0.4, 0.1, 0.0], 0.0, unsafe)
    with pytest.raises(WorkspaceError):
        plan_task([0.4, 0.1, 0.0], 0.0, _handover(), PlannerConfig(handover_position=(2.0, 0.0, 0.3)))


@pytest.mark.parametrize("camera_yaw", [0.0, 0.4, -2.0])
def test_handover_waypoint_on_far_side(camera_yaw):
    pose = _handover(math.pi)  # hazard already pointing away along -x
    sps = plan_task([0.4, 0.1, 0.0], 0.0, pose, camera_yaw=camera_yaw)
    worker = WORKER_DIRECTION + camera_yaw
    for sp in sps[3:]:
        assert angular_distance(sp.hazard_heading, worker) >= math.pi / 2 - 1e-12
    pointing = _handover(WORKER_DIRECTION)
    sps = plan_task([0.4, 0.1, 0.0], 0.3, pointing, camera_yaw=camera_yaw)
    assert angular_distance(sps[3].hazard_heading, worker) >= math.pi / 2 - 1e-12
    assert sps[3].yaw == pytest.approx(0.3 + pointing.rotation)


# trapezoid ---------------------------------------------------------------------------

def test_trapezoid_examples():
    assert trapezoid_profile(0, 1, 1).t_total == 0.0
    assert trapezoid_profile(2, 1, 1).t_total == 3.0
    tri = trapezoid_profile(0.5, 10, 2)
    assert tri.v_peak == pytest.approx(1.0, abs=1e-15)
    assert tri.t_total == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        trapezoid_profile(-1, 1, 1)
    with pytest.raises(ValueError):
        trapezoid_profile(1, 0, 1)


def _max_reach(t, v, a):
    """Longest rest-to-rest distance coverable in time t."""
    if t >= 2 * v / a:
        return v * (t - v / a)
    return a * t * t / 4


@settings(max_examples=200)
@given(st.floats(1e-3, 10), st.floats(0.05, 5), st.floats(0.05, 5))
def test_trapezoid_is_time_optimal(d, v, a):
    prof = trapezoid_profile(d, v, a)
    closed = d / v + v / a if d >= v * v / a else 2 * math.sqrt(d / a)
    assert abs(prof.t_total - closed) <= 1e-12 * max(1.0, closed)
    if prof.t_total > 1e-3:
        assert _max_reach(prof.t_total - 1e-3, v, a) < d
    t = np.linspace(0, prof.t_total, 301)
    assert np.all(np.abs(prof.velocity(t)) <= v + 1e-12)
    assert prof.position(prof.t_total) == pytest.approx(d, rel=1e-12)
    assert prof.velocity(0.0) == 0.0 and abs(prof.velocity(prof.t_total)) < 1e-9


# joint trajectories --------------------------------------------------------------------

def test_single_setpoint_at_start():
    arm = PlanarArm()
    q = np.array([0.3, 0.8, -0.4, 0.2])
    pos, yaw = arm.fk(q)
    traj = plan_trajectory([Setpoint("only", tuple(pos), yaw, Gripper.OPEN)])
    assert len(traj) == 1 and not traj.qd_d.any()


def test_one_joint_one_radian_takes_two_seconds():
    limits = JointLimits((1.0, 1.0, 1.0, 1.0), (1.0, 1.0, 1.0, 1.0))
    a = Setpoint("a", (0.0, 0.0, 0.0), 0.0, Gripper.OPEN)
    b = Setpoint("b", (1.0, 0.0, 0.0), 0.0, Gripper.OPEN)
    traj = plan_trajectory([a, b], ik=identity_joint_ik, limits=limits, dt=0.001)
    assert traj.times[-1] == pytest.approx(2.0, abs=1e-12)
    assert traj.q_d[-1, 0] == 1.0
    check_trajectory(traj, limits, 0.001)


def test_ik_round_trip_and_unreachable():
    arm = PlanarArm()
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = np.array([rng.uniform(-3, 3), rng.uniform(0.1, 2.8), rng.uniform(-3, 3), rng.uniform(0, 0.5)])
        pos, yaw = arm.fk(q)
        back = arm.ik(pos, yaw, q)
        assert np.allclose(back, q, atol=1e-9)
    far = Setpoint("far", (3.0, 0.0, 0.1), 0.0, Gripper.OPEN)
    with pytest.raises(ReachabilityError, match="setpoint 1 \\(far\\)"):
        plan_trajectory([Setpoint("near", (0.5, 0.0, 0.1), 0.0, Gripper.OPEN), far])


def test_dwell_holds_position():
    arm = PlanarArm()
    pos, yaw = arm.fk([0.2, 1.0, 0.1, 0.3])
    sp = Setpoint("hold", tuple(pos), yaw, Gripper.CLOSED, dwell=0.1)
    traj = plan_trajectory([sp], dt=0.01)
    assert len(traj) == 11
    assert traj.times[-1] == pytest.approx(0.1)
    assert np.all(traj.q_d == traj.q_d[0]) and not traj.qd_d.any()


@pytest.mark.parametrize("seed", range(10))
def test_random_pairs_respect_limits(seed):
    rng = np.random.default_rng(seed)
    arm = PlanarArm()
    limits = JointLimits()
    sps = []
    for label in ("a", "b", "c"):
        q = [rng.uniform(-3, 3), rng.uniform(0.2, 2.5), rng.uniform(-3, 3), rng.uniform(0, 0.6)]
        pos, yaw = arm.fk(q)
        sps.append(Setpoint(label, tuple(pos), yaw, Gripper.OPEN, dwell=float(rng.uniform(0, 0.2))))
    traj = plan_trajectory(sps, limits=limits, dt=0.008)
    check_trajectory(traj, limits, 0.008)
    assert traj.labels == ["a", "b", "c"]


def test_trajectory_text_round_trip():
    arm = PlanarArm()
    p0, y0 = arm.fk([0.1, 1.0, 0.2, 0.1])
    p1, y1 = arm.fk([0.6, 0.7, -0.3, 0.3])
    traj = plan_trajectory([Setpoint("a", tuple(p0), y0, Gripper.OPEN), Setpoint("b", tuple(p1), y1, Gripper.OPEN)])
    back = JointTrajectory.from_text(traj.to_text(), 4)
    assert np.max(np.abs(back.q_d - traj.q_d)) <= 5e-10
    assert np.max(np.abs(back.times - traj.times)) <= 5e-10


# tracking -------------------------------------------------------------------------------

def test_tracking_empty_and_bad_gain():
    empty = JointTrajectory(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 4)))
    assert len(simulate_tracking(empty, 5.0)) == 0
    with pytest.raises(ValueError):
        simulate_tracking(empty, 0.0)


@pytest.mark.parametrize("gain", [0.5, 2.0, 10.0])
def test_tracking_converges_on_constant_reference(gain):
    t = np.arange(0, 6 / gain, 0.001)
    q = np.ones((len(t), 1))
    traj = JointTrajectory(t, q, np.zeros_like(q))
    log = simulate_tracking(traj, gain, q0=[0.0])
    k = int(round(5 / gain / 0.001))
    assert abs(log.error[k, 0]) < 0.01 * 1.0
    assert abs(log.error[k, 0] - math.exp(-5)) < 1e-9


def test_tracking_error_bound_from_perfect_start():
    arm = PlanarArm()
    limits = JointLimits()
    p0, y0 = arm.fk([0.1, 1.0, 0.2, 0.1])
    p1, y1 = arm.fk([1.6, 0.4, -1.3, 0.5])
    dt = 0.008
    traj = plan_trajectory([Setpoint("a", tuple(p0), y0, Gripper.OPEN), Setpoint("b", tuple(p1), y1, Gripper.OPEN)], dt=dt)
    for gain in (5.0, 20.0):
        log = simulate_tracking(traj, gain)
        bound = np.asarray(limits.a_max) * dt / gain
        assert np.all(np.abs(log.error) <= bound + 1e-12)
