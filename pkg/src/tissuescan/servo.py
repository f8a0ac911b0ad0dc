"""Position-based visual servoing over the base/camera/end-effector/marker/contact chain.

Frame letters: B robot base, C camera, E end-effector, M probe marker,
P contact point on the reference trajectory, P* the same point after the
tissue moved. ``x_T_y`` maps y-coordinates into x. The commanded pose is

    B_T_E* = B_T_E  E_T_M  M_T_C  C_T_P  P_T_P*  P*_T_M*  M*_T_E*

with M*_T_E* = (E_T_M)^-1. The inner loop (marker feedback, 25 Hz) reads
the tissue estimate published by the outer loop (10 Hz) through a
latest-value snapshot and never waits for it.
"""

from __future__ import annotations

import bisect
import csv
import math
import threading
from dataclasses import dataclass, field, replace
from typing import IO, Generic, Sequence, TypeVar

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from tissuescan.errors import (DegenerateNormalError, EndOfTrajectory, InvalidPixelError, StaleEstimateError,
                               StaleTransformError)
from tissuescan.se3 import RigidTransform, apply, compose, compose_chain, inverse, orthonormalize
from tissuescan.surface import NormalMap, OrganizedPointCloud, point_at_pixel

LIVE_FACTORS = ("base_T_ee", "camera_T_marker", "camera_T_contact", "contact_T_updated")


@dataclass(frozen=True)
class ControlConfig:
    inner_rate_hz: float = 25.0
    outer_rate_hz: float = 10.0
    stale_timeout_s: float = 0.5
    contact_offset_mm: float = 1.0
    tip_in_marker: tuple[float, float, float] = (-5.0, 0.0, 30.0)
    degenerate_angle_deg: float = 1.0

    def __post_init__(self) -> None:
        if self.inner_rate_hz < self.outer_rate_hz:
            raise ValueError("inner_rate_hz must be >= outer_rate_hz")
        if self.outer_rate_hz <= 0 or self.stale_timeout_s <= 0:
            raise ValueError("rates and stale timeout must be positive")


class FrameGraph:
    """Fixed calibration transforms plus timestamped live observations."""

    def __init__(self, base_T_camera: RigidTransform, ee_T_marker: RigidTransform):
        self.base_T_camera = base_T_camera
        self.ee_T_marker = ee_T_marker
        self._live: dict[str, tuple[RigidTransform, float]] = {}

    def observe(self, name: str, transform: RigidTransform, t: float) -> None:
        if name not in LIVE_FACTORS:
            raise KeyError(f"unknown live factor {name!r}")
        self._live[name] = (transform, t)

    def get(self, name: str, now: float | None = None, timeout: float = math.inf) -> RigidTransform:
        if name not in self._live:
            raise StaleTransformError(name)
        transform, stamp = self._live[name]
        if now is not None and now - stamp > timeout:
            raise StaleTransformError(name, now - stamp)
        return transform


def control_law(graph: FrameGraph, desired: RigidTransform, now: float | None = None,
                timeout: float = math.inf) -> RigidTransform:
    """Commanded base_T_ee; ``desired`` is the P*_T_M* factor."""
    e_t_m = graph.ee_T_marker
    return compose_chain([
        graph.get("base_T_ee", now, timeout),
        e_t_m,
        inverse(graph.get("camera_T_marker", now, timeout)),
        graph.get("camera_T_contact", now, timeout),
        graph.get("contact_T_updated", now, timeout),
        desired,
        inverse(e_t_m),
    ])


def desired_marker_pose(contact_point: ArrayLike, normal: ArrayLike,
                        camera_position: ArrayLike = (0.0, 0.0, 0.0), contact_offset_mm: float = 1.0,
                        tip_in_marker: ArrayLike = (-5.0, 0.0, 30.0),
                        degenerate_angle_deg: float = 1.0) -> RigidTransform:
    """Marker pose (in the frame of ``contact_point``) that presses the probe along −n.

    Marker axes: z is the probe axis (−n), x is the marker's outward face,
    turned about z as far toward the camera as the axis allows, y = z × x.
    The probe tip sits ``contact_offset_mm`` below the surface.
    """
    p = np.asarray(contact_point, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    z = -n
    to_cam = np.asarray(camera_position, dtype=np.float64) - p
    dist = np.linalg.norm(to_cam)
    if dist == 0:
        raise DegenerateNormalError("camera coincides with the contact point")
    to_cam /= dist
    if abs(float(to_cam @ z)) > math.cos(math.radians(degenerate_angle_deg)):
        raise DegenerateNormalError("surface normal is parallel to the camera direction")
    x = to_cam - (to_cam @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.column_stack([x, y, z])
    tip = p + contact_offset_mm * z
    return RigidTransform(r, tip - r @ np.asarray(tip_in_marker, dtype=np.float64))


def contact_frame(contact_point: ArrayLike, normal: ArrayLike,
                  camera_position: ArrayLike = (0.0, 0.0, 0.0)) -> RigidTransform:
    """Contact frame P: origin at the contact point, axes of the pressing probe."""
    m = desired_marker_pose(contact_point, normal, camera_position, contact_offset_mm=0.0,
                            tip_in_marker=(0.0, 0.0, 0.0))
    return RigidTransform(m.rotation, np.asarray(contact_point, dtype=np.float64))


# Trajectory

@dataclass(frozen=True, eq=False)
class ScanTrajectory:
    """Contact points and unit normals in the reference tissue frame, mapped by ``anchor``.

    ``points``/``normals`` hold the current (anchored) geometry; the reference
    geometry is recovered through the inverse anchor, so re-anchoring never
    accumulates.
    """

    points: NDArray[np.float64]
    normals: NDArray[np.float64]
    dwell_s: NDArray[np.float64]
    anchor: RigidTransform = field(default_factory=RigidTransform.identity)
    max_spacing_mm: float = 5.0

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
        dwell = np.array(self.dwell_s, dtype=np.float64).reshape(-1)
        if len(pts) == 0:
            raise ValueError("trajectory must have at least one point")
        if nrm.shape != pts.shape or dwell.shape != (len(pts),):
            raise ValueError("points, normals and dwell times must have matching lengths")
        if not np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-9):
            raise ValueError("normals must be unit length")
        if np.any(dwell <= 0):
            raise ValueError("dwell times must be positive")
        if len(pts) > 1 and np.linalg.norm(np.diff(pts, axis=0), axis=1).max() > self.max_spacing_mm + 1e-9:
            raise ValueError("consecutive trajectory points exceed max_spacing_mm")
        for name, arr in (("points", pts), ("normals", nrm), ("dwell_s", dwell)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def reference_points(self) -> NDArray[np.float64]:
        return apply(inverse(self.anchor), self.points)

    @property
    def reference_normals(self) -> NDArray[np.float64]:
        return self.normals @ self.anchor.rotation

    def index_at(self, elapsed_s: float) -> int:
        """Active point after ``elapsed_s`` of scanning; EndOfTrajectory past the last dwell."""
        ends = np.cumsum(self.dwell_s)
        i = bisect.bisect_right(ends.tolist(), elapsed_s + 1e-12)
        if i >= len(self):
            raise EndOfTrajectory(f"trajectory of {len(self)} points finished at {ends[-1]:.3f} s")
        return i


def update_trajectory(traj: ScanTrajectory, estimate, age_s: float = 0.0,
                      stale_timeout_s: float = math.inf) -> ScanTrajectory:
    """Map the reference geometry by ``estimate.transform``; dwell times unchanged.

    ``age_s`` is how long ago the estimate was produced; beyond
    ``stale_timeout_s`` the estimate is refused.
    """
    if age_s > stale_timeout_s:
        raise StaleEstimateError(f"tissue estimate is {age_s:.3f} s old")
    m = estimate.transform
    return ScanTrajectory(apply(m, traj.reference_points), traj.reference_normals @ m.rotation.T,
                          traj.dwell_s, anchor=m, max_spacing_mm=traj.max_spacing_mm)


def trajectory_from_cloud(cloud: OrganizedPointCloud, normals: NormalMap, pixels: Sequence[tuple[float, float]],
                          dwell_s: float = 1.0, window: int = 9, max_spacing_mm: float = 5.0) -> ScanTrajectory:
    """Sample contact points (box-averaged) and window-averaged normals at image pixels."""
    pts, nrm = [], []
    half = window // 2
    h, w = normals.valid.shape
    for u, v in pixels:
        pts.append(point_at_pixel(cloud, u, v, window=window))
        iu, iv = int(round(u)), int(round(v))
        r0, r1, c0, c1 = max(iv - half, 0), min(iv + half + 1, h), max(iu - half, 0), min(iu + half + 1, w)
        ok = normals.valid[r0:r1, c0:c1]
        if not ok.any():
            raise InvalidPixelError(f"no valid normals around pixel ({u}, {v})")
        n = normals.normals[r0:r1, c0:c1][ok].sum(axis=0)
        nrm.append(n / np.linalg.norm(n))
    return ScanTrajectory(np.array(pts), np.array(nrm), np.full(len(pts), float(dwell_s)),
                          max_spacing_mm=max_spacing_mm)


# Inner-loop step

@dataclass(frozen=True)
class ServoClock:
    now: float
    start: float = 0.0


@dataclass(frozen=True)
class ServoCommand:
    t: float
    pose: RigidTransform  # commanded base_T_ee
    index: int
    desired_marker: RigidTransform  # camera_T_marker* implied by the command
    stale: bool = False


def servo_targets(traj: ScanTrajectory, index: int, config: ControlConfig,
                  camera_position: ArrayLike = (0.0, 0.0, 0.0)) -> tuple[RigidTransform, RigidTransform, RigidTransform]:
    """(C_T_P, P_T_P*, P*_T_M*) for trajectory point ``index``."""
    p_ref = traj.reference_points[index]
    n_ref = traj.reference_normals[index]
    c_t_p = contact_frame(p_ref, n_ref, camera_position)
    c_t_mstar = desired_marker_pose(p_ref, n_ref, camera_position, config.contact_offset_mm,
                                    config.tip_in_marker, config.degenerate_angle_deg)
    p_inv = inverse(c_t_p)
    return c_t_p, compose(compose(p_inv, traj.anchor), c_t_p), compose(p_inv, c_t_mstar)


def servo_step(graph: FrameGraph, traj: ScanTrajectory, clock: ServoClock,
               config: ControlConfig = ControlConfig(),
               camera_position: ArrayLike = (0.0, 0.0, 0.0)) -> ServoCommand:
    """Select the active point, publish its contact factors, run the control law.

    ``graph`` must already hold fresh base_T_ee and camera_T_marker.
    """
    index = traj.index_at(clock.now - clock.start)
    c_t_p, p_t_pstar, pstar_t_mstar = servo_targets(traj, index, config, camera_position)
    graph.observe("camera_T_contact", c_t_p, clock.now)
    graph.observe("contact_T_updated", p_t_pstar, clock.now)
    cmd = control_law(graph, pstar_t_mstar, clock.now, config.stale_timeout_s)
    desired = compose_chain([c_t_p, p_t_pstar, pstar_t_mstar])
    return ServoCommand(clock.now, cmd, index, desired)


# Plant

@dataclass(frozen=True)
class RobotPlant:
    """First-order Cartesian lag behind a fixed command latency.

    ``queue`` holds (activation_time, pose) pairs not yet active; ``target``
    is the latest activated command.
    """

    pose: RigidTransform
    tau_s: float = 0.08
    latency_s: float = 0.04
    time: float = 0.0
    target: RigidTransform | None = None
    queue: tuple[tuple[float, RigidTransform], ...] = ()

    def __post_init__(self) -> None:
        if self.tau_s < 0 or self.latency_s < 0:
            raise ValueError("tau_s and latency_s must be non-negative")


def _approach(pose: RigidTransform, target: RigidTransform, fraction: float) -> RigidTransform:
    """Move ``fraction`` of the way to ``target``; rotation along the geodesic."""
    if fraction >= 1.0:
        return target
    if fraction <= 0.0:
        return pose
    rel = target.rotation.T @ pose.rotation
    rv = Rotation.from_matrix(rel).as_rotvec()
    r = orthonormalize(target.rotation @ Rotation.from_rotvec((1.0 - fraction) * rv).as_matrix())
    t = target.translation + (1.0 - fraction) * (pose.translation - target.translation)
    return RigidTransform(r, t)


def _relax(pose: RigidTransform, target: RigidTransform | None, tau: float, dt: float) -> RigidTransform:
    if target is None or dt <= 0:
        return pose
    if tau == 0:
        return target
    return _approach(pose, target, 1.0 - math.exp(-dt / tau))


def _integrate(plant: RobotPlant, queue: list, end: float) -> RobotPlant:
    """Advance to ``end``, switching target at every activation in ``queue``."""
    pose, target, t = plant.pose, plant.target, plant.time
    while queue and queue[0][0] <= end + 1e-12:
        t_act, nxt = queue.pop(0)
        pose = _relax(pose, target, plant.tau_s, t_act - t)
        t = max(t, t_act)
        target = nxt
        if plant.tau_s == 0:
            pose = target
    pose = _relax(pose, target, plant.tau_s, end - t)
    return replace(plant, pose=pose, target=target, time=end, queue=tuple(queue))


def plant_command(plant: RobotPlant, command: RigidTransform | ServoCommand | None) -> RobotPlant:
    """Queue ``command`` at the plant's current time without advancing it.

    A command with zero latency activates at once, so a zero-lag plant is
    already on it when sampled at this instant.
    """
    if isinstance(command, ServoCommand):
        command = command.pose
    queue = list(plant.queue)
    if command is not None:
        queue.append((plant.time + plant.latency_s, command))
    return _integrate(plant, queue, plant.time)


def plant_step(plant: RobotPlant, command: RigidTransform | ServoCommand | None, dt: float) -> RobotPlant:
    """Queue ``command`` (if any) at the plant's current time and integrate ``dt`` seconds.

    Integration is exact for the piecewise-constant target: the interval is
    split at every command activation.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    plant = plant_command(plant, command)
    return _integrate(plant, list(plant.queue), plant.time + dt)


# Snapshot shared between the loops

T = TypeVar("T")


class LatestValue(Generic[T]):
    """Single-writer, single-reader latest-value cell; reads never block on the writer."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._item: tuple[T, float] | None = None

    def publish(self, value: T, t: float) -> None:
        with self._lock:
            self._item = (value, t)

    def read(self) -> tuple[T, float] | None:
        with self._lock:
            return self._item


class InnerLoop:
    """Marker-feedback loop: one command per tick from the latest published tissue estimate.

    The estimate is taken from ``snapshot`` without waiting; once it is older
    than the stale timeout every tick raises StaleEstimateError until the
    outer loop publishes again. With ``motion_compensation`` off the
    reference trajectory is used as is.
    """

    def __init__(self, graph: FrameGraph, reference: ScanTrajectory, snapshot: LatestValue,
                 config: ControlConfig = ControlConfig(), motion_compensation: bool = True,
                 start: float = 0.0, camera_position: ArrayLike = (0.0, 0.0, 0.0)):
        self.graph = graph
        self.reference = reference
        self.snapshot = snapshot
        self.config = config
        self.motion_compensation = motion_compensation
        self.start = start
        self.camera_position = np.asarray(camera_position, dtype=np.float64)

    def tick(self, now: float, base_T_ee: RigidTransform, camera_T_marker: RigidTransform) -> ServoCommand:
        self.graph.observe("base_T_ee", base_T_ee, now)
        self.graph.observe("camera_T_marker", camera_T_marker, now)
        item = self.snapshot.read()
        if item is None:
            raise StaleEstimateError("no tissue estimate published yet")
        estimate, stamp = item
        traj = update_trajectory(self.reference, estimate, now - stamp, self.config.stale_timeout_s)
        if not self.motion_compensation:
            traj = self.reference
        cmd = servo_step(self.graph, traj, ServoClock(now, self.start), self.config, self.camera_position)
        return replace(cmd, stale=bool(getattr(estimate, "stale", False)))


# Command log

COMMAND_COLUMNS = (["t"] + [f"cmd_{i}" for i in range(12)] + [f"plant_{i}" for i in range(12)]
                   + ["index", "stale"])


def write_command_log(fh: IO[str], rows: Sequence[tuple[float, RigidTransform, RigidTransform, int, bool]]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(COMMAND_COLUMNS)
    for t, cmd, plant_pose, index, stale in rows:
        writer.writerow([repr(float(t))] + [repr(x) for x in cmd.as_row12()]
                        + [repr(x) for x in plant_pose.as_row12()] + [index, int(stale)])
