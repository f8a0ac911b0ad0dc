"""Synthetic deforming-phantom scene: textured heightfield on a moving platform.

The surface lives in its own frame (x, y across the patch, z into the tissue,
so the outward normal is roughly -z). The platform moves that frame rigidly
by :func:`motion_offset`; the camera sees it through a fixed mounting
transform. Frames carry an RGB image, an organized point cloud, per-pixel
labels and the ground-truth ``camera_T_surface`` pose.

Motion amplitudes follow the breathing-profile table and are peak-to-peak:
a 3 mm profile is ``1.5 * sin(2 pi t / period)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import gaussian_filter
from scipy.signal import lfilter
from scipy.spatial.transform import Rotation

from tissuescan import kernels
from tissuescan._fallback import _bilinear
from tissuescan.se3 import RigidTransform, apply, compose, inverse, rot_x
from tissuescan.surface import CameraIntrinsics, OrganizedPointCloud, default_camera, project_points

BACKGROUND, TISSUE, OCCLUDER = 0, 1, 2

# period (s), peak-to-peak amplitude (mm)
PROFILES = {1: (3.0, 3.0), 2: (5.0, 3.0), 3: (5.0, 5.0)}
AXES = ("x", "y", "z")


@dataclass(frozen=True)
class Sinusoid:
    period_s: float
    amplitude_mm: float  # peak-to-peak
    phase_rad: float = 0.0

    def __call__(self, t: float) -> float:
        return 0.5 * self.amplitude_mm * np.sin(2.0 * np.pi * t / self.period_s + self.phase_rad)


@dataclass(frozen=True)
class FreeForm:
    """Mean-reverting Gaussian walk, smoothed by a moving average.

    ``sigma_mm`` is the stationary RMS displacement per axis after smoothing.
    ``rotation_deg`` > 0 adds rotational wander bounded by that angle.
    """

    sigma_mm: float
    seed: int = 0
    smoothing_s: float = 0.5
    correlation_s: float = 1.5
    rotation_deg: float = 0.0
    rate_hz: float = 100.0
    horizon_s: float = 600.0


@dataclass(frozen=True)
class MotionProfile:
    sinusoids: tuple[tuple[str, Sinusoid], ...] = ()
    free_form: FreeForm | None = None

    @property
    def is_static(self) -> bool:
        return not self.sinusoids and self.free_form is None


def profile_motion(profile: int, axis: str, seed: int = 0, rotation_deg: float = 0.0) -> MotionProfile:
    """Table-style trial motion: one sinusoidal axis, or ``axis='free'``."""
    period, amplitude = PROFILES[profile]
    if axis in AXES:
        return MotionProfile(sinusoids=((axis, Sinusoid(period, amplitude)),))
    if axis in ("free", "free-form"):
        # same RMS as the profile's sinusoid, decorrelating over about a quarter period
        sigma = amplitude / (2.0 * np.sqrt(2.0))
        return MotionProfile(free_form=FreeForm(sigma, seed=seed, correlation_s=period / 4.0,
                                                rotation_deg=rotation_deg))
    raise ValueError(f"unknown axis {axis!r}")


def _unit_smoothed_walk(n: int, rho: float, window: int, rng: np.random.Generator) -> NDArray[np.float64]:
    drive = rng.standard_normal(n + window - 1) * np.sqrt(1.0 - rho * rho)
    drive[0] = rng.standard_normal()  # start from the stationary distribution
    x = lfilter([1.0], [1.0, -rho], drive)
    smoothed = np.convolve(x, np.ones(window) / window, mode="valid")
    # variance of a length-`window` average of a unit AR(1) process
    lags = np.arange(1, window)
    var = (window + 2.0 * np.sum((window - lags) * rho ** lags)) / window ** 2
    return smoothed / np.sqrt(var)


@functools.lru_cache(maxsize=32)
def _free_form_samples(ff: FreeForm) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    rng = np.random.default_rng(ff.seed)
    dt = 1.0 / ff.rate_hz
    n = int(np.ceil(ff.horizon_s * ff.rate_hz)) + 2
    window = max(1, int(round(ff.smoothing_s * ff.rate_hz)))
    rho = float(np.exp(-dt / ff.correlation_s))
    trans = np.stack([_unit_smoothed_walk(n, rho, window, rng) for _ in range(3)], axis=1) * ff.sigma_mm
    rot = np.zeros((n, 3))
    if ff.rotation_deg > 0:
        rot = np.stack([_unit_smoothed_walk(n, rho, window, rng) for _ in range(3)], axis=1)
        rot *= np.radians(ff.rotation_deg) / 2.0
        norm = np.linalg.norm(rot, axis=1, keepdims=True)
        limit = np.radians(ff.rotation_deg)
        rot = np.where(norm > limit, rot * limit / np.maximum(norm, 1e-12), rot)
    return trans, rot


def motion_offset(profile: MotionProfile, t: float) -> RigidTransform:
    """Platform displacement of the surface frame at time ``t`` (s)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    d = np.zeros(3)
    for axis, s in profile.sinusoids:
        d[AXES.index(axis)] += s(t)
    r = np.eye(3)
    ff = profile.free_form
    if ff is not None:
        if t > ff.horizon_s:
            raise ValueError(f"t={t} beyond the free-form horizon {ff.horizon_s} s")
        trans, rot = _free_form_samples(ff)
        x = t * ff.rate_hz
        i = min(int(x), len(trans) - 2)
        a = x - i
        d += (1 - a) * trans[i] + a * trans[i + 1]
        rv = (1 - a) * rot[i] + a * rot[i + 1]
        if np.any(rv):
            r = Rotation.from_rotvec(rv).as_matrix()
    return RigidTransform(r, d)


@dataclass(frozen=True)
class PhantomSurface:
    heights: NDArray[np.float64]  # (ny, nx) mm, z into the tissue
    albedo: NDArray[np.float64]  # (ny, nx) in [0, 1]
    x0: float
    y0: float
    spacing: float
    blobs: NDArray[np.float64]  # (n, 2) blob centres, surface x/y in mm
    base_rgb: tuple[float, float, float]
    hsv_low: tuple[float, float, float]
    hsv_high: tuple[float, float, float]
    us_wavevectors: NDArray[np.float64]  # (k, 3) rad/mm
    us_phases: NDArray[np.float64]
    mounting: RigidTransform  # camera_T_surface with the platform at rest

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ny, nx = self.heights.shape
        return self.x0, self.x0 + (nx - 1) * self.spacing, self.y0, self.y0 + (ny - 1) * self.spacing

    def height_at(self, x, y):
        return _bilinear(self.heights, (np.asarray(x) - self.x0) / self.spacing,
                         (np.asarray(y) - self.y0) / self.spacing)

    def surface_points(self, xy: NDArray[np.float64]) -> NDArray[np.float64]:
        xy = np.atleast_2d(xy)
        return np.column_stack([xy, self.height_at(xy[:, 0], xy[:, 1])])

    def volume(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Speckle-like scalar field, unit variance, Gaussian autocorrelation."""
        k = len(self.us_phases)
        return np.sqrt(2.0 / k) * np.cos(points @ self.us_wavevectors.T + self.us_phases).sum(axis=-1)


def make_phantom(seed: int = 0, *, size_mm: tuple[float, float] = (120.0, 90.0), spacing: float = 0.2,
                 blob_count: int = 50, blob_sigma_mm: float = 1.0, blob_depth: float = 0.6,
                 blob_spacing_mm: float = 9.0, texture_contrast: float = 0.015,
                 bump_count: int = 4, bump_height_mm: float = 3.0,
                 speckle_length_mm: float = 1.0, us_components: int = 160,
                 tilt_deg: float = 25.0, standoff_mm: float = 170.0) -> PhantomSurface:
    rng = np.random.default_rng(seed)
    w, h = size_mm
    xs = np.arange(-w / 2, w / 2 + spacing / 2, spacing)
    ys = np.arange(-h / 2, h / 2 + spacing / 2, spacing)
    gx, gy = np.meshgrid(xs, ys)

    heights = np.zeros_like(gx)
    for _ in range(bump_count):
        cx, cy = rng.uniform(-w / 3, w / 3), rng.uniform(-h / 3, h / 3)
        s = rng.uniform(15.0, 30.0)
        heights += rng.uniform(-bump_height_mm, bump_height_mm) * np.exp(
            -((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * s * s))

    fine = gaussian_filter(rng.standard_normal(gx.shape), 2.0)
    albedo = 0.85 + texture_contrast * fine / fine.std()
    blobs = []
    margin = 8.0
    tries = 0
    while len(blobs) < blob_count:
        tries += 1
        if tries > 200_000:
            raise RuntimeError("could not place the requested number of blobs")
        c = rng.uniform([-w / 2 + margin, -h / 2 + margin], [w / 2 - margin, h / 2 - margin])
        if all(np.hypot(*(c - b)) >= blob_spacing_mm for b in blobs):
            blobs.append(c)
    blobs = np.array(blobs)
    for bx, by in blobs:
        albedo -= blob_depth * np.exp(-((gx - bx) ** 2 + (gy - by) ** 2) / (2 * blob_sigma_mm ** 2))
    albedo = np.clip(albedo, 0.05, 1.0)

    wavevectors = rng.normal(scale=1.0 / speckle_length_mm, size=(us_components, 3))
    phases = rng.uniform(0, 2 * np.pi, us_components)
    mounting = compose(RigidTransform(np.eye(3), [0.0, 0.0, standoff_mm]), rot_x(tilt_deg))
    return PhantomSurface(
        heights=np.ascontiguousarray(heights), albedo=np.ascontiguousarray(albedo),
        x0=float(xs[0]), y0=float(ys[0]), spacing=spacing, blobs=blobs,
        base_rgb=(0.85, 0.45, 0.30), hsv_low=(0.0, 0.35, 0.10), hsv_high=(50.0, 1.0, 1.0),
        us_wavevectors=wavevectors, us_phases=phases, mounting=mounting,
    )


@dataclass(frozen=True)
class Occluder:
    """Gray convex polygon (pixel vertices) shown for t in [t_on, t_off), drifting at velocity px/s."""

    t_on: float
    t_off: float
    vertices: tuple[tuple[float, float], ...]
    velocity: tuple[float, float] = (0.0, 0.0)
    depth_mm: float = 110.0
    gray: int = 200

    def polygon_at(self, t: float) -> NDArray[np.float64]:
        return np.asarray(self.vertices, dtype=float) + (t - self.t_on) * np.asarray(self.velocity)


def polygon_mask(vertices: NDArray[np.float64], height: int, width: int) -> NDArray[np.bool_]:
    """Pixels inside a convex polygon (either winding)."""
    v = np.asarray(vertices, dtype=float)
    mask = np.zeros((height, width), dtype=bool)
    u0 = max(int(np.floor(v[:, 0].min())), 0)
    u1 = min(int(np.ceil(v[:, 0].max())) + 1, width)
    v0 = max(int(np.floor(v[:, 1].min())), 0)
    v1 = min(int(np.ceil(v[:, 1].max())) + 1, height)
    if u0 >= u1 or v0 >= v1:
        return mask
    vv, uu = np.mgrid[v0:v1, u0:u1]
    cross = []
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        cross.append((b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0]))
    cross = np.stack(cross)
    mask[v0:v1, u0:u1] = (cross >= 0).all(axis=0) | (cross <= 0).all(axis=0)
    return mask


@dataclass(frozen=True)
class SceneFrame:
    image: NDArray[np.uint8]  # (H, W, 3) RGB
    cloud: OrganizedPointCloud
    pose: RigidTransform  # ground-truth camera_T_surface
    labels: NDArray[np.uint8]  # BACKGROUND / TISSUE / OCCLUDER
    t: float


@dataclass
class Scene:
    """Everything needed to render frames on demand."""

    surface: PhantomSurface
    motion: MotionProfile = field(default_factory=MotionProfile)
    occluders: Sequence[Occluder] = ()
    camera: CameraIntrinsics = field(default_factory=default_camera)
    noise_sigma_mm: float = 0.3
    image_noise: float = 1.0
    seed: int = 0

    def pose_at(self, t: float) -> RigidTransform:
        return compose(self.surface.mounting, motion_offset(self.motion, t))

    def frame(self, t: float) -> SceneFrame:
        return generate_frame(self.surface, self.motion, self.occluders, self.camera,
                              self.noise_sigma_mm, t, self.seed, image_noise=self.image_noise)

    def blob_pixels(self, t: float = 0.0) -> NDArray[np.float64]:
        pts = apply(self.pose_at(t), self.surface.surface_points(self.surface.blobs))
        return project_points(self.camera, pts)


BACKGROUND_RGB = (25.0, 90.0, 40.0)
_BANK_PAD = 128


def _frame_rng(seed: int, t: float) -> np.random.Generator:
    return np.random.default_rng([seed, int(round(t * 1e6))])


@functools.lru_cache(maxsize=4)
def _noise_bank(seed: int, height: int, width: int) -> tuple[NDArray[np.float64], NDArray[np.float32]]:
    # per-seed banks of i.i.d. unit normals; each frame crops them at a random
    # offset, far cheaper than drawing 1.6M fresh samples per frame
    rng = np.random.default_rng([seed, 0x5EED])
    depth = rng.standard_normal((height + _BANK_PAD, width + _BANK_PAD))
    pixel = rng.standard_normal((height + _BANK_PAD, width + _BANK_PAD, 3), dtype=np.float32)
    return depth, pixel


def generate_frame(surface: PhantomSurface, profile: MotionProfile, occluders: Sequence[Occluder],
                   camera: CameraIntrinsics, noise_sigma_mm: float, t: float, seed: int,
                   image_noise: float = 1.0) -> SceneFrame:
    """Render the scene at time ``t``; bit-identical for identical (t, seed)."""
    pose = compose(surface.mounting, motion_offset(profile, t))
    h, w = camera.height, camera.width
    rng = _frame_rng(seed, t)
    depth_bank, pixel_bank = _noise_bank(seed, h, w)
    du, dv, pu, pv = rng.integers(0, _BANK_PAD, size=4)
    depth_noise = None
    if noise_sigma_mm > 0:
        depth_noise = depth_bank[dv:dv + h, du:du + w] * noise_sigma_mm
    points, alb, valid = kernels.raycast_heightfield(
        surface.heights, surface.albedo, surface.x0, surface.y0, surface.spacing,
        np.array(pose.rotation, order="C"), np.array(pose.translation),
        camera.fx, camera.fy, camera.cx, camera.cy, w, h, depth_noise)

    if image_noise > 0:
        noise = np.ascontiguousarray(pixel_bank[pv:pv + h, pu:pu + w])
    else:
        noise = np.zeros((0, 0, 3), dtype=np.float32)
    base = np.asarray(surface.base_rgb) * 255.0
    image = kernels.shade_image(alb, valid.view(np.uint8), base, np.asarray(BACKGROUND_RGB),
                                noise, float(image_noise))
    labels = valid.astype(np.uint8)  # TISSUE == 1

    for occ in occluders:
        if not (occ.t_on <= t < occ.t_off):
            continue
        m = polygon_mask(occ.polygon_at(t), h, w)
        if not m.any():
            continue
        vv, uu = np.nonzero(m)
        shade = occ.gray + (noise[vv, uu] * image_noise if image_noise > 0 else 0.0)
        image[vv, uu] = np.clip(np.floor(shade + 0.5), 0, 255).astype(np.uint8)
        labels[m] = OCCLUDER
        points[vv, uu] = np.column_stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy,
                                          np.ones(len(uu))]) * occ.depth_mm
        valid = valid | m

    return SceneFrame(image=image, cloud=OrganizedPointCloud(points, valid), pose=pose,
                      labels=labels, t=t)


@dataclass(frozen=True)
class UltrasoundSlice:
    image: NDArray[np.float64]  # (depth samples, lateral samples)
    contact: bool


@dataclass(frozen=True)
class SliceGeometry:
    lateral_mm: float = 20.0
    depth_mm: float = 20.0
    samples: int = 48


def render_ultrasound_slice(surface: PhantomSurface, probe_pose: RigidTransform,
                            geometry: SliceGeometry = SliceGeometry()) -> UltrasoundSlice:
    """Sample the phantom volume on the probe's imaging plane.

    ``probe_pose`` is ``surface_T_tip``: the probe tip frame (z along the probe
    axis into the tissue, y across the imaging plane) in the surface frame.
    The slice is all zero when the tip is above the surface.
    """
    n = geometry.samples
    tip = probe_pose.translation
    if tip[2] - surface.height_at(tip[0], tip[1]) < 0:
        return UltrasoundSlice(np.zeros((n, n)), contact=False)
    lateral = np.linspace(-geometry.lateral_mm / 2, geometry.lateral_mm / 2, n)
    depth = np.linspace(0.0, geometry.depth_mm, n)
    local = np.zeros((n, n, 3))
    local[..., 1] = lateral[None, :]
    local[..., 2] = depth[:, None]
    pts = apply(probe_pose, local.reshape(-1, 3))
    below = pts[:, 2] - surface.height_at(pts[:, 0], pts[:, 1])
    vals = surface.volume(np.column_stack([pts[:, :2], below]))
    vals = np.where(below >= 0, vals, 0.0)
    return UltrasoundSlice(vals.reshape(n, n), contact=True)


def surface_T_camera(scene: Scene, t: float) -> RigidTransform:
    return inverse(scene.pose_at(t))
