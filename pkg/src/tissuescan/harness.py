"""Simulated experiments: tracking accuracy, servo accuracy, ultrasound NCC stability.

All experiments run on a simulated clock in integer milliseconds: the outer
(tracking) loop ticks every 100 ms and the inner (servo) loop every 40 ms.
The tracker does not see the probe, so one tracking pass per scene is shared
by every servo run on that scene; this is also what makes the paired
motion-compensation on/off runs differ only in trajectory updating.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import itertools
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from tissuescan.errors import StaleEstimateError, TissueScanError, UndefinedCorrelationError
from tissuescan.phantom import (MotionProfile, Occluder, Scene, SliceGeometry, UltrasoundSlice, make_phantom,
                                profile_motion, render_ultrasound_slice)
from tissuescan.se3 import (RigidTransform, compose, compose_chain, inverse, pose_error, renormalized, rot_x,
                            rot_z, translate)
from tissuescan.servo import (ControlConfig, FrameGraph, InnerLoop, LatestValue, RobotPlant, ScanTrajectory,
                              plant_command, plant_step, servo_targets, trajectory_from_cloud)
from tissuescan.surface import estimate_normals, save_cloud
from tissuescan.tracker import (Roi, TissuePoseEstimate, TissueTracker, TrackerConfig, log_record, segment_tissue,
                                write_log_line)

KINDS = ("tracking-accuracy", "servo-accuracy", "ncc-stability")
TRACKING_AXES = ("x", "y", "z", "free")
SERVO_AXES = ("x", "y", "z")

# fixed robot calibration of the simulated rig
BASE_T_CAMERA = compose_chain([translate(250.0, -80.0, 320.0), rot_x(180.0), rot_z(15.0)])
EE_T_MARKER = compose(translate(0.0, 12.0, -20.0), rot_z(90.0))


class ExperimentAborted(TissueScanError):
    """The closed loop lost the tissue estimate for too many ticks."""


class EmptyRecordError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "tracking-accuracy"
    profile: int = 1  # 0 is a static scene
    axis: str = "x"
    duration_s: float = 30.0
    seed: int = 0
    noise_sigma_mm: float = 0.3
    image_noise: float = 1.0
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    plant_tau_s: float = 0.08
    plant_latency_s: float = 0.04
    marker_noise_mm: float = 0.1
    marker_noise_deg: float = 0.3
    motion_compensation: bool = True
    free_rotation_deg: float = 0.0
    dwell_s: float = 1.0
    scan_spacing_mm: float = 0.5
    max_stale_fraction: float = 0.1
    occluders: tuple[Occluder, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if self.profile not in (0, 1, 2, 3):
            raise ValueError("profile must be 0 (static), 1, 2 or 3")
        if self.axis not in TRACKING_AXES:
            raise ValueError(f"axis must be one of {TRACKING_AXES}")
        if self.noise_sigma_mm < 0:
            raise ValueError("noise_sigma_mm must be non-negative")

    @property
    def inner_ms(self) -> int:
        return int(round(1000.0 / self.control.inner_rate_hz))

    @property
    def outer_ms(self) -> int:
        return int(round(1000.0 / self.control.outer_rate_hz))

    def motion(self) -> MotionProfile:
        if self.profile == 0:
            return MotionProfile()
        return profile_motion(self.profile, self.axis, seed=self.seed, rotation_deg=self.free_rotation_deg)

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["occluders"] = len(self.occluders)
        return d


# Config file

def _coerce(text: str, like):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(_coerce(p, like[0] if like else 0.0) for p in parts)
    return text.strip()


def apply_overrides(cfg: ExperimentConfig, values: dict[str, str]) -> ExperimentConfig:
    """Apply ``key = value`` strings; ``tracker.*`` and ``control.*`` reach the nested configs."""
    top: dict = {}
    nested: dict[str, dict] = {"tracker": {}, "control": {}}
    for key, text in values.items():
        head, _, rest = key.partition(".")
        if rest:
            if head not in nested:
                raise ValueError(f"unknown config section {head!r}")
            sub = getattr(cfg, head)
            if rest not in {f.name for f in dataclasses.fields(sub)}:
                raise ValueError(f"unknown config key {key!r}")
            nested[head][rest] = _coerce(text, getattr(sub, rest))
        else:
            names = {f.name for f in dataclasses.fields(cfg)} - {"tracker", "control", "occluders"}
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            top[key] = _coerce(text, getattr(cfg, key))
    for head, vals in nested.items():
        if vals:
            top[head] = dataclasses.replace(getattr(cfg, head), **vals)
    return dataclasses.replace(cfg, **top)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from exc
    return apply_overrides(base or ExperimentConfig(), dict(parser["experiment"]))


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), base)


# Records

@dataclass(frozen=True)
class PoseSample:
    index: int
    t: float
    translation_mm: float
    rotation_deg: float
    inliers: int
    stale: bool


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    return statistics.fmean(xs), (statistics.pstdev(xs) if len(xs) > 1 else 0.0)


@dataclass(frozen=True)
class MetricsRecord:
    config: ExperimentConfig
    samples: tuple[PoseSample, ...]

    def summary(self) -> dict:
        if not self.samples:
            raise EmptyRecordError("record has no samples")
        tm, ts = _mean_std([s.translation_mm for s in self.samples])
        rm, rs = _mean_std([s.rotation_deg for s in self.samples])
        return {"count": len(self.samples), "translation_mm_mean": tm, "translation_mm_std": ts,
                "rotation_deg_mean": rm, "rotation_deg_std": rs,
                "stale_count": sum(s.stale for s in self.samples)}

    @property
    def translation_mean(self) -> float:
        return self.summary()["translation_mm_mean"]

    @property
    def rotation_mean(self) -> float:
        return self.summary()["rotation_deg_mean"]


@dataclass(frozen=True)
class NccSeries:
    config: ExperimentConfig
    motion_compensation: bool
    t: tuple[float, ...]
    scores: tuple[float, ...]
    flagged: tuple[bool, ...]

    def summary(self) -> dict:
        if not self.scores:
            raise EmptyRecordError("series has no samples")
        m, s = _mean_std(self.scores)
        return {"count": len(self.scores), "ncc_mean": m, "ncc_std": s, "flagged_count": sum(self.flagged),
                "motion_compensation": self.motion_compensation}

    @property
    def mean(self) -> float:
        return self.summary()["ncc_mean"]


def ncc(a: UltrasoundSlice | NDArray, b: UltrasoundSlice | NDArray) -> float:
    """Zero-mean normalized cross-correlation at zero displacement."""
    x = np.asarray(getattr(a, "image", a), dtype=np.float64)
    y = np.asarray(getattr(b, "image", b), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("slices must have the same shape")
    x = x - x.mean()
    y = y - y.mean()
    nx = math.sqrt(float(np.sum(x * x)))
    ny = math.sqrt(float(np.sum(y * y)))
    if nx <= 1e-12 or ny <= 1e-12:
        raise UndefinedCorrelationError("zero-variance slice")
    return float(np.clip(np.sum(x * y) / (nx * ny), -1.0, 1.0))


def ncc_flagged(a, b) -> tuple[float, bool]:
    """ncc, with an undefined correlation reported as (0.0, True)."""
    try:
        return ncc(a, b), False
    except UndefinedCorrelationError:
        return 0.0, True


# Scene and tracking pass

def build_scene(cfg: ExperimentConfig, occluders: Sequence[Occluder] | None = None) -> Scene:
    return Scene(make_phantom(cfg.seed), cfg.motion(), tuple(cfg.occluders if occluders is None else occluders),
                 noise_sigma_mm=cfg.noise_sigma_mm, image_noise=cfg.image_noise, seed=cfg.seed)


@dataclass
class TrackingPass:
    """Outer-loop output: one estimate per tick, plus the reference frame's data."""

    scene: Scene
    tracker: TissueTracker
    times_ms: list[int]
    estimates: list[TissuePoseEstimate]
    reference_frame: object
    initial_rois: list[Roi]


def _gt_motion(scene: Scene, t: float, gt0_inv: RigidTransform) -> RigidTransform:
    return compose(scene.pose_at(t), gt0_inv)


def run_tracking_pass(cfg: ExperimentConfig, scene: Scene | None = None, log: IO[str] | None = None,
                      dump_dir: Path | None = None,
                      on_step: Callable[[int, TissueTracker], None] | None = None) -> TrackingPass:
    scene = scene or build_scene(cfg)
    tracker = TissueTracker(scene.camera, cfg.tracker, seed=cfg.seed)
    ref = scene.frame(0.0)
    rois = list(tracker.initialize(ref))
    n = int(round(cfg.duration_s * 1000)) // cfg.outer_ms
    times = [0]
    estimates = [tracker.last_estimate]
    if log is not None:
        write_log_line(log, log_record(0, 0.0, tracker.last_estimate, tracker.rois))
    if dump_dir is not None:
        _dump(dump_dir, 0, ref)
    for k in range(1, n + 1):
        ms = k * cfg.outer_ms
        frame = scene.frame(ms / 1000.0)
        est = tracker.step(frame)
        times.append(ms)
        estimates.append(est)
        if log is not None:
            write_log_line(log, log_record(k, ms / 1000.0, est, tracker.rois))
        if dump_dir is not None:
            _dump(dump_dir, k, frame)
        if on_step is not None:
            on_step(k, tracker)
    return TrackingPass(scene, tracker, times, estimates, ref, rois)


def _dump(directory: Path, index: int, frame) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_cloud(directory / f"frame_{index:05d}.cloud", frame.cloud)
    np.save(directory / f"frame_{index:05d}_rgb.npy", frame.image)


def run_tracking_accuracy(cfg: ExperimentConfig, log: IO[str] | None = None,
                          dump_dir: Path | None = None) -> MetricsRecord:
    tp = run_tracking_pass(cfg, log=log, dump_dir=dump_dir)
    gt0_inv = inverse(tp.scene.pose_at(0.0))
    samples = []
    for k, (ms, est) in enumerate(zip(tp.times_ms, tp.estimates)):
        if k == 0:
            continue
        e = pose_error(est.transform, _gt_motion(tp.scene, ms / 1000.0, gt0_inv))
        samples.append(PoseSample(k, ms / 1000.0, e.translation_mm, e.rotation_deg, est.inlier_count, est.stale))
    return MetricsRecord(cfg, tuple(samples))


# Closed loop

def scan_trajectory(cfg: ExperimentConfig, tp: TrackingPass, points: int) -> ScanTrajectory:
    """Straight scan across the middle of the visible tissue, ``scan_spacing_mm`` apart."""
    frame = tp.reference_frame
    normals = estimate_normals(frame.cloud)
    vs, us = np.nonzero(segment_tissue(frame.image, cfg.tracker))
    cu, cv = float(np.median(us)), float(np.median(vs))
    # pixel pitch at the tissue is about depth / fx mm
    depth = float(np.median(frame.cloud.points[frame.cloud.valid][:, 2]))
    step_px = cfg.scan_spacing_mm * tp.scene.camera.fx / depth
    offsets = (np.arange(points) - (points - 1) / 2.0) * step_px
    pixels = [(cu + o, cv) for o in offsets]
    return trajectory_from_cloud(frame.cloud, normals, pixels, dwell_s=cfg.dwell_s,
                                 max_spacing_mm=max(3 * cfg.scan_spacing_mm, 1.0))


@dataclass(frozen=True)
class LoopTick:
    ms: int
    camera_T_tip: RigidTransform
    desired_tip: RigidTransform  # ground truth
    index: int
    stale: bool
    inliers: int


def simulate_servo(cfg: ExperimentConfig, tp: TrackingPass, traj: ScanTrajectory, motion_compensation: bool,
                   on_tick: Callable[[LoopTick], None] | None = None, command_log: list | None = None,
                   zero_lag: bool = False) -> list[LoopTick]:
    """Run the inner loop over a finished tracking pass; the plant starts on target."""
    ctl = cfg.control
    graph = FrameGraph(BASE_T_CAMERA, EE_T_MARKER)
    snapshot: LatestValue[TissuePoseEstimate] = LatestValue()
    loop = InnerLoop(graph, traj, snapshot, ctl, motion_compensation)
    tip = translate(*ctl.tip_in_marker)
    m_t_e = inverse(EE_T_MARKER)

    def marker_target(index: int, anchor: RigidTransform) -> RigidTransform:
        c_t_p, _, pstar_t_mstar = servo_targets(traj, index, ctl)
        return compose_chain([anchor, c_t_p, pstar_t_mstar])

    c_t_m0 = marker_target(0, RigidTransform.identity())
    plant = RobotPlant(compose_chain([BASE_T_CAMERA, c_t_m0, m_t_e]),
                       tau_s=0.0 if zero_lag else cfg.plant_tau_s,
                       latency_s=0.0 if zero_lag else cfg.plant_latency_s)
    rng = np.random.default_rng([cfg.seed, 0x3A7C])
    gt0_inv = inverse(tp.scene.pose_at(0.0))
    c_t_b = inverse(BASE_T_CAMERA)
    outer = dict(zip(tp.times_ms, tp.estimates))
    end_ms = tp.times_ms[-1]
    ticks: list[LoopTick] = []
    stale_ticks = 0
    last_inliers = 0
    for ms in range(0, end_ms + 1, cfg.inner_ms):
        t = ms / 1000.0
        if ms in outer and not outer[ms].stale:
            snapshot.publish(outer[ms], t)
            last_inliers = outer[ms].inlier_count
        # encoder reading: the physical pose is always a proper rotation
        b_t_e = renormalized(plant.pose)
        c_t_m = compose_chain([c_t_b, b_t_e, EE_T_MARKER])
        observed = compose(c_t_m, _marker_noise(rng, cfg))
        try:
            cmd = loop.tick(t, b_t_e, observed)
            index, stale = cmd.index, cmd.stale
        except StaleEstimateError:
            cmd, stale = None, True
            index = ticks[-1].index if ticks else 0
            stale_ticks += 1
        # sample the probe after any command that takes effect at this instant
        plant = plant_command(plant, cmd)
        c_t_m_now = compose_chain([c_t_b, renormalized(plant.pose), EE_T_MARKER])
        gt_m = _gt_motion(tp.scene, t, gt0_inv)
        tick = LoopTick(ms, compose(c_t_m_now, tip), compose(marker_target(index, gt_m), tip), index, stale,
                        last_inliers)
        ticks.append(tick)
        if command_log is not None and cmd is not None:
            command_log.append((t, cmd.pose, plant.pose, index, stale))
        if on_tick is not None:
            on_tick(tick)
        plant = plant_step(plant, None, cfg.inner_ms / 1000.0)
    if stale_ticks > cfg.max_stale_fraction * len(ticks):
        raise ExperimentAborted(f"tissue estimate stale on {stale_ticks} of {len(ticks)} servo ticks")
    return ticks


def _marker_noise(rng: np.random.Generator, cfg: ExperimentConfig) -> RigidTransform:
    d = rng.standard_normal(6)
    r = Rotation.from_rotvec(np.radians(cfg.marker_noise_deg) * d[:3]).as_matrix()
    return RigidTransform(r, cfg.marker_noise_mm * d[3:])


def _points_for(cfg: ExperimentConfig) -> int:
    return int(math.floor(cfg.duration_s / cfg.dwell_s)) + 1


def run_servo_accuracy(cfg: ExperimentConfig, tracking: TrackingPass | None = None,
                       command_log: list | None = None) -> MetricsRecord:
    tp = tracking or run_tracking_pass(cfg)
    traj = scan_trajectory(cfg, tp, _points_for(cfg))
    ticks = simulate_servo(cfg, tp, traj, cfg.motion_compensation, command_log=command_log)
    samples = []
    for i, tick in enumerate(ticks):
        e = pose_error(tick.camera_T_tip, tick.desired_tip)
        samples.append(PoseSample(i, tick.ms / 1000.0, e.translation_mm, e.rotation_deg, tick.inliers, tick.stale))
    return MetricsRecord(cfg, tuple(samples))


def run_ncc_stability(cfg: ExperimentConfig, tracking: TrackingPass | None = None,
                      geometry: SliceGeometry = SliceGeometry()) -> tuple[NccSeries, NccSeries]:
    """Hold the probe on one tissue point; compare each slice with the first, MC on and off."""
    tp = tracking or run_tracking_pass(cfg)
    single = dataclasses.replace(cfg, dwell_s=cfg.duration_s + 1.0)
    traj = scan_trajectory(single, tp, 1)
    out = []
    for mc in (True, False):
        ticks = simulate_servo(cfg, tp, traj, mc)
        ref = None
        ts, scores, flags = [], [], []
        for tick in ticks:
            if tick.ms % cfg.outer_ms:
                continue  # slices are compared at the outer-loop rate
            t = tick.ms / 1000.0
            s_t_tip = compose(inverse(tp.scene.pose_at(t)), tick.camera_T_tip)
            sl = render_ultrasound_slice(tp.scene.surface, s_t_tip, geometry)
            if ref is None:
                ref = sl
            score, flagged = ncc_flagged(ref, sl)
            ts.append(t)
            scores.append(score)
            flags.append(flagged)
        out.append(NccSeries(dataclasses.replace(cfg, motion_compensation=mc), mc, tuple(ts), tuple(scores),
                             tuple(flags)))
    return out[0], out[1]


# Occlusion scenario

def plan_occlusion(rois: Sequence[Roi], count: int, t_on: float, t_off: float, margin_px: float = 12.0,
                   clearance_px: float = 4.0) -> tuple[Occluder, tuple[int, ...]]:
    """Convex occluder covering exactly ``count`` ROIs (each grown by ``margin_px``).

    Picks the group with the smallest covering hull that keeps ``clearance_px``
    away from every other ROI. Returns the occluder and the covered ROI ids.
    """
    def corners(r: Roi, grow: float) -> NDArray[np.float64]:
        u, v, w, h = r.rect
        return np.array([[u - grow, v - grow], [u + w + grow, v - grow],
                         [u + w + grow, v + h + grow], [u - grow, v + h + grow]], dtype=float)

    best = None
    for group in itertools.combinations(range(len(rois)), count):
        pts = np.vstack([corners(rois[i], margin_px) for i in group])
        hull = ConvexHull(pts)
        poly = pts[hull.vertices]
        if best is not None and hull.volume >= best[0]:
            continue
        ok = True
        for j, r in enumerate(rois):
            if j in group:
                continue
            c = corners(r, clearance_px)
            if _convex_overlap(poly, c):
                ok = False
                break
        if ok:
            best = (hull.volume, poly, group)
    if best is None:
        raise ValueError(f"no convex occluder covers {count} ROIs without touching the others")
    _, poly, group = best
    occ = Occluder(t_on, t_off, tuple(map(tuple, poly.tolist())))
    return occ, tuple(rois[i].id for i in group)


def _convex_overlap(a: NDArray[np.float64], b: NDArray[np.float64]) -> bool:
    """Separating-axis test for two convex polygons."""
    for poly in (a, b):
        for p, q in zip(poly, np.roll(poly, -1, axis=0)):
            axis = np.array([q[1] - p[1], p[0] - q[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


# Reports

def _fmt(x: float) -> str:
    return repr(float(x))


def write_report(obj: MetricsRecord | NccSeries, path: str | Path) -> tuple[Path, Path]:
    """Per-frame CSV at ``path`` plus a JSON summary next to it (same stem, ``.json``)."""
    summary = obj.summary()  # raises on empty input before any file is touched
    path = Path(path)
    json_path = path.with_suffix(".json")
    if isinstance(obj, MetricsRecord):
        header = ["index", "t", "translation_mm", "rotation_deg", "inliers", "stale"]
        rows = [[s.index, _fmt(s.t), _fmt(s.translation_mm), _fmt(s.rotation_deg), s.inliers, int(s.stale)]
                for s in obj.samples]
    else:
        header = ["index", "t", "ncc", "flagged"]
        rows = [[i, _fmt(t), _fmt(s), int(f)] for i, (t, s, f) in enumerate(zip(obj.t, obj.scores, obj.flagged))]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    doc = {"kind": obj.config.kind, "seed": obj.config.seed, "config": obj.config.echo(), "summary": summary}
    with open(json_path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path, json_path


def read_report_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
