"""Tissue tracking loop over image + organized point cloud.

Each step segments tissue by an HSV box and moves each ROI by zero-mean NCC
block matching. ROIs that are occluded or whose appearance drifted are
stopped. The initial-to-current rigid motion is fitted with RANSAC over ROI
triples, then stopped ROIs are re-projected through that motion and the ones
that look like their reference again resume.

The reference tissue frame is the camera frame at the reference instant, so
an estimate maps reference-frame points directly to current camera points.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import gaussian_filter, maximum_filter

from tissuescan import kernels
from tissuescan.errors import (BehindCameraError, DegenerateGeometryError, InsufficientTextureError,
                               InvalidPixelError, NoConsensusError, TooFewRoisError)
from tissuescan.se3 import RigidTransform, apply
from tissuescan.surface import CameraIntrinsics, OrganizedPointCloud, point_at_pixel, project

HIST_BINS = 32
ORIENTATION_BINS = 8


class RoiState(enum.Enum):
    TRACKING = "tracking"
    STOPPED = "stopped"


@dataclass(frozen=True)
class TrackerConfig:
    roi_count: int = 12
    roi_width: int = 20
    roi_height: int = 25
    occlusion_tissue_fraction: float = 0.6
    appearance_match_threshold: float = 0.8  # Bhattacharyya, intensity histogram
    descriptor_match_threshold: float = 0.7  # Bhattacharyya, gradient-orientation histogram
    ncc_floor: float = 0.5
    ransac_iterations: int = 100
    ransac_inlier_threshold_mm: float = 1.5
    search_window_px: int = 15
    hsv_low: tuple[float, float, float] = (0.0, 0.35, 0.10)
    hsv_high: tuple[float, float, float] = (50.0, 1.0, 1.0)
    corner_sigma_px: float = 6.0
    min_corner_score: float = 1.5e-4
    edge_margin_px: int = 8
    point_window_px: int = 5
    template_update: bool = False

    def __post_init__(self) -> None:
        if self.roi_count < 6:
            raise ValueError("roi_count must be at least 6")
        if self.ransac_inlier_threshold_mm <= 0:
            raise ValueError("ransac_inlier_threshold_mm must be positive")
        if self.ransac_iterations < 1:
            raise ValueError("ransac_iterations must be positive")


@dataclass(frozen=True)
class AppearanceDescriptor:
    intensity_histogram: NDArray[np.float64]
    keypoint_signature: NDArray[np.float64]  # magnitude-weighted gradient-orientation histogram


@dataclass(frozen=True, eq=False)
class Roi:
    id: int
    u: float  # top-left column, sub-pixel
    v: float  # top-left row, sub-pixel
    width: int
    height: int
    state: RoiState
    reference_appearance: AppearanceDescriptor
    reference_point: NDArray[np.float64]
    template: NDArray[np.float64]
    current_point: NDArray[np.float64] | None = None

    @property
    def center(self) -> tuple[float, float]:
        return self.u + (self.width - 1) / 2.0, self.v + (self.height - 1) / 2.0

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return int(round(self.u)), int(round(self.v)), self.width, self.height

    @property
    def tracking(self) -> bool:
        return self.state is RoiState.TRACKING


@dataclass(frozen=True)
class TissuePoseEstimate:
    transform: RigidTransform
    inlier_count: int
    mean_inlier_residual_mm: float
    stale: bool = False
    inliers: tuple[int, ...] = ()


def as_gray(image: NDArray) -> NDArray[np.float64]:
    """Luma in [0, 1]; grayscale float input passes through."""
    if image.ndim == 2:
        return np.asarray(image, dtype=np.float64)
    rgb = image.astype(np.float64)
    return (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]) / 255.0


def _crop(img: NDArray, rect: tuple[int, int, int, int]) -> NDArray:
    u, v, w, h = rect
    return img[v:v + h, u:u + w]


def _inside(rect: tuple[int, int, int, int], shape: tuple[int, ...]) -> bool:
    u, v, w, h = rect
    return u >= 0 and v >= 0 and u + w <= shape[1] and v + h <= shape[0]


def _rects_intersect(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def describe(patch: NDArray[np.float64]) -> AppearanceDescriptor:
    hist, _ = np.histogram(np.clip(patch, 0.0, 1.0), bins=HIST_BINS, range=(0.0, 1.0))
    hist = hist / max(hist.sum(), 1)
    gy, gx = np.gradient(patch)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    ori, _ = np.histogram(ang, bins=ORIENTATION_BINS, range=(0.0, 2 * np.pi), weights=mag)
    total = ori.sum()
    ori = ori / total if total > 0 else np.full(ORIENTATION_BINS, 1.0 / ORIENTATION_BINS)
    return AppearanceDescriptor(hist.astype(np.float64), ori.astype(np.float64))


def bhattacharyya(p: NDArray[np.float64], q: NDArray[np.float64]) -> float:
    return float(np.sum(np.sqrt(p * q)))


def appearance_matches(ref: AppearanceDescriptor, cur: AppearanceDescriptor, config: TrackerConfig) -> bool:
    return (bhattacharyya(ref.intensity_histogram, cur.intensity_histogram) >= config.appearance_match_threshold
            and bhattacharyya(ref.keypoint_signature, cur.keypoint_signature)
            >= config.descriptor_match_threshold)


# Segmentation and ROI selection

def segment_tissue(image: NDArray[np.uint8], config: TrackerConfig) -> NDArray[np.bool_]:
    lo, hi = config.hsv_low, config.hsv_high
    rgb = np.ascontiguousarray(image, dtype=np.uint8)
    return kernels.hsv_box_mask(rgb, lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])


# ROI initialization

def corner_response(gray: NDArray[np.float64], sigma: float) -> NDArray[np.float64]:
    """Smaller eigenvalue of the Gaussian-windowed structure tensor."""
    gy, gx = np.gradient(gray)
    sxx = gaussian_filter(gx * gx, sigma)
    syy = gaussian_filter(gy * gy, sigma)
    sxy = gaussian_filter(gx * gy, sigma)
    half_tr = 0.5 * (sxx + syy)
    return half_tr - np.sqrt(np.maximum((0.5 * (sxx - syy)) ** 2 + sxy * sxy, 0.0))


def init_rois(image: NDArray, mask: NDArray[np.bool_], cloud: OrganizedPointCloud,
              config: TrackerConfig) -> list[Roi]:
    """Place ``roi_count`` non-overlapping ROIs on the most corner-like tissue spots."""
    gray = as_gray(image)
    score = corner_response(gray, config.corner_sigma_px)
    peaks = (score == maximum_filter(score, size=7)) & (score >= config.min_corner_score)
    vs, us = np.nonzero(peaks)
    order = np.argsort(-score[vs, us], kind="stable")
    w, h, m = config.roi_width, config.roi_height, config.edge_margin_px
    chosen: list[Roi] = []
    for k in order:
        cu, cv = int(us[k]), int(vs[k])
        rect = (cu - w // 2, cv - h // 2, w, h)
        grown = (rect[0] - m, rect[1] - m, w + 2 * m, h + 2 * m)
        if not _inside(grown, gray.shape) or not _crop(mask, grown).all():
            continue
        if any(_rects_intersect(rect, r.rect) for r in chosen):
            continue
        roi_center = (rect[0] + (w - 1) / 2.0, rect[1] + (h - 1) / 2.0)
        try:
            ref = point_at_pixel(cloud, *roi_center, window=config.point_window_px)
        except InvalidPixelError:
            continue
        template = _crop(gray, rect).copy()
        chosen.append(Roi(id=len(chosen), u=float(rect[0]), v=float(rect[1]), width=w, height=h,
                          state=RoiState.TRACKING, reference_appearance=describe(template),
                          reference_point=ref, template=template, current_point=ref))
        if len(chosen) == config.roi_count:
            return chosen
    raise InsufficientTextureError(
        f"only {len(chosen)} textured ROI candidates, {config.roi_count} required")


# ROI tracking

def _subpixel(scores: NDArray[np.float64], i: int, j: int) -> tuple[float, float]:
    def vertex(a: float, b: float, c: float) -> float:
        denom = a - 2.0 * b + c
        return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5)) if denom < 0 else 0.0

    di = vertex(scores[i - 1, j], scores[i, j], scores[i + 1, j]) if 0 < i < scores.shape[0] - 1 else 0.0
    dj = vertex(scores[i, j - 1], scores[i, j], scores[i, j + 1]) if 0 < j < scores.shape[1] - 1 else 0.0
    return di, dj


def match_roi(gray: NDArray[np.float64], roi: Roi, template: NDArray[np.float64],
              window: int) -> tuple[float, float, float]:
    """Best zero-mean NCC placement of ``template`` near ``roi``: (u, v, score)."""
    u0, v0, w, h = roi.rect
    H, W = gray.shape
    r0, r1 = max(v0 - window, 0), min(v0 + h + window, H)
    c0, c1 = max(u0 - window, 0), min(u0 + w + window, W)
    if r1 - r0 < h or c1 - c0 < w:
        return roi.u, roi.v, 0.0
    scores = kernels.ncc_surface(np.ascontiguousarray(gray[r0:r1, c0:c1]), np.ascontiguousarray(template))
    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    # a perfect match is exact; interpolating it would only add asymmetry bias
    di, dj = (0.0, 0.0) if scores[i, j] >= 1.0 - 1e-12 else _subpixel(scores, i, j)
    return c0 + j + dj, r0 + i + di, float(scores[i, j])


def track_rois(prev_image: NDArray | None, image: NDArray, rois: Sequence[Roi], config: TrackerConfig,
               cloud: OrganizedPointCloud | None = None) -> list[Roi]:
    """Move every tracking ROI to its best NCC match within ±search_window_px.

    The matched template is the ROI's anchored reference patch, or with
    ``template_update`` the patch under the ROI in ``prev_image``.
    """
    gray = as_gray(image)
    prev = as_gray(prev_image) if (config.template_update and prev_image is not None) else None
    out = []
    for roi in rois:
        if not roi.tracking:
            out.append(roi)
            continue
        template = roi.template if prev is None else _crop(prev, roi.rect)
        u, v, score = match_roi(gray, roi, template, config.search_window_px)
        if score < config.ncc_floor:
            out.append(replace(roi, state=RoiState.STOPPED, current_point=None))
            continue
        moved = replace(roi, u=u, v=v)
        if cloud is not None:
            try:
                moved = replace(moved, current_point=point_at_pixel(cloud, *moved.center,
                                                                    window=config.point_window_px))
            except InvalidPixelError:
                moved = replace(moved, state=RoiState.STOPPED, current_point=None)
        out.append(moved)
    return out


# Occlusion gating

def check_occlusion(roi: Roi, mask: NDArray[np.bool_], image: NDArray, config: TrackerConfig) -> RoiState:
    rect = roi.rect
    if not _inside(rect, mask.shape):
        return RoiState.STOPPED
    if _crop(mask, rect).mean() < config.occlusion_tissue_fraction:
        return RoiState.STOPPED
    patch = _crop(as_gray(image), rect)
    if not appearance_matches(roi.reference_appearance, describe(patch), config):
        return RoiState.STOPPED
    return RoiState.TRACKING


# Rigid pose estimation

def _optimal_rotation(h: NDArray[np.float64]) -> tuple[NDArray[np.float64], bool]:
    """r = V U^T from the SVD of H; a reflection is fixed by negating V's third column."""
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    r = v @ u.T
    flipped = bool(np.linalg.det(r) < 0)
    if flipped:
        v[:, 2] *= -1.0
        r = v @ u.T
    return r, flipped


def _check_spread(points: NDArray[np.float64], what: str) -> None:
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[0] <= 1e-9 or s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometryError(f"{what} points are coincident or collinear")


def kabsch_fit(initial: NDArray[np.float64], current: NDArray[np.float64]) -> RigidTransform:
    """Least-squares rigid motion with current ≈ r @ initial + t."""
    p = np.asarray(initial, dtype=np.float64)
    q = np.asarray(current, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("expected two (N, 3) arrays of equal shape")
    if len(p) < 3:
        raise DegenerateGeometryError("need at least three correspondences")
    _check_spread(p, "initial")
    _check_spread(q, "current")
    c_init = p.mean(axis=0)
    c_cur = q.mean(axis=0)
    h = (p - c_init).T @ (q - c_cur)
    r, _ = _optimal_rotation(h)
    return RigidTransform(r, c_cur - r @ c_init)


def _score(t: RigidTransform, p: NDArray[np.float64], q: NDArray[np.float64],
           threshold: float) -> tuple[NDArray[np.bool_], float]:
    res = np.linalg.norm(apply(t, p) - q, axis=1)
    inl = res <= threshold
    return inl, float(res[inl].mean()) if inl.any() else np.inf


def _triple_hypotheses(p: NDArray[np.float64], q: NDArray[np.float64]
                       ) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]]:
    """Vectorized kabsch_fit over stacked (k, 3, 3) triples; returns (r, t, usable)."""
    pc = p - p.mean(axis=1, keepdims=True)
    qc = q - q.mean(axis=1, keepdims=True)
    usable = np.ones(len(p), dtype=bool)
    for c in (pc, qc):
        s = np.linalg.svd(c, compute_uv=False)
        usable &= (s[:, 0] > 1e-9) & (s[:, 1] > 1e-9 * s[:, 0])
    h = np.einsum("kni,knj->kij", pc, qc)
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2).copy()
    r = v @ np.swapaxes(u, 1, 2)
    flip = np.linalg.det(r) < 0
    v[flip, :, 2] *= -1.0
    r[flip] = v[flip] @ np.swapaxes(u[flip], 1, 2)
    t = q.mean(axis=1) - np.einsum("kij,kj->ki", r, p.mean(axis=1))
    return r, t, usable


def estimate_pose_ransac(rois: Sequence[Roi], config: TrackerConfig,
                         rng: np.random.Generator) -> TissuePoseEstimate:
    """Best-consensus rigid motion over ROI triples, re-fit on its inliers.

    Triples are drawn at random, or enumerated exhaustively when there are no
    more of them than ``ransac_iterations``. Hypotheses are ranked by inlier
    count, then by mean inlier residual, then by draw order. Stopped ROIs are
    filtered out before any random draw.
    """
    live = [r for r in rois if r.tracking and r.current_point is not None]
    if len(live) < 3:
        raise TooFewRoisError(f"{len(live)} tracking ROIs, at least 3 needed")
    p = np.array([r.reference_point for r in live])
    q = np.array([r.current_point for r in live])
    n = len(live)
    thr = config.ransac_inlier_threshold_mm

    if n * (n - 1) * (n - 2) // 6 <= config.ransac_iterations:
        samples = np.array(list(itertools.combinations(range(n), 3)))
    else:
        samples = np.argsort(rng.random((config.ransac_iterations, n)), axis=1)[:, :3]

    r, t, usable = _triple_hypotheses(p[samples], q[samples])
    res = np.linalg.norm(np.einsum("kij,nj->kni", r, p) + t[:, None, :] - q[None], axis=2)
    inl = (res <= thr) & usable[:, None]
    counts = inl.sum(axis=1)
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, (res * inl).sum(axis=1) / np.maximum(counts, 1), np.inf)
    # lexsort: last key is primary; stable, so ties keep draw order
    best_k = int(np.lexsort((means, -counts))[0])
    if not usable.any() or counts[best_k] < 3:
        raise NoConsensusError(f"best hypothesis has {int(counts[best_k]) if usable.any() else 0} inliers")

    inliers = inl[best_k]
    for _ in range(2):
        try:
            fit = kabsch_fit(p[inliers], q[inliers])
        except DegenerateGeometryError as exc:
            raise NoConsensusError("inlier set is degenerate") from exc
        new_inl, mean_res = _score(fit, p, q, thr)
        if new_inl.sum() < 3 or np.array_equal(new_inl, inliers):
            break
        inliers = new_inl
    new_inl, mean_res = _score(fit, p, q, thr)
    ids = tuple(live[i].id for i in np.nonzero(new_inl)[0])
    return TissuePoseEstimate(fit, int(new_inl.sum()), mean_res, inliers=ids)


# Reinitialization

def reinitialize_rois(stopped: Sequence[Roi], estimate: TissuePoseEstimate, image: NDArray,
                      mask: NDArray[np.bool_], k: CameraIntrinsics, config: TrackerConfig) -> list[Roi]:
    """Project each stopped ROI's reference point through the estimate; resume it if the
    landing rect is on tissue and looks like the reference."""
    gray = as_gray(image)
    out = []
    for roi in stopped:
        if roi.tracking:
            out.append(roi)
            continue
        try:
            cu, cv = project(k, estimate.transform, roi.reference_point)
        except BehindCameraError:
            out.append(roi)
            continue
        cand = replace(roi, u=cu - (roi.width - 1) / 2.0, v=cv - (roi.height - 1) / 2.0,
                       state=RoiState.TRACKING, current_point=apply(estimate.transform, roi.reference_point))
        if check_occlusion(cand, mask, gray, config) is RoiState.TRACKING:
            out.append(cand)
        else:
            out.append(roi)
    return out


@dataclass
class TissueTracker:
    """Tracker state owned by the outer loop; :meth:`step` runs one full tracking iteration."""

    camera: CameraIntrinsics
    config: TrackerConfig = field(default_factory=TrackerConfig)
    seed: int = 0
    rois: list[Roi] = field(default_factory=list)
    last_estimate: TissuePoseEstimate | None = None
    mask: NDArray[np.bool_] | None = None
    _prev: NDArray[np.float64] | None = None
    _rng: np.random.Generator | None = None

    def initialize(self, frame) -> list[Roi]:
        self._rng = np.random.default_rng(self.seed)
        gray = as_gray(frame.image)
        self.mask = segment_tissue(frame.image, self.config)
        self.rois = init_rois(gray, self.mask, frame.cloud, self.config)
        self._prev = gray
        self.last_estimate = TissuePoseEstimate(RigidTransform.identity(), len(self.rois), 0.0,
                                                inliers=tuple(r.id for r in self.rois))
        return self.rois

    def step(self, frame) -> TissuePoseEstimate:
        if self._rng is None:
            raise RuntimeError("tracker not initialized")
        cfg = self.config
        gray = as_gray(frame.image)
        self.mask = segment_tissue(frame.image, cfg)
        rois = track_rois(self._prev, gray, self.rois, cfg, cloud=frame.cloud)
        rois = [r if not r.tracking or check_occlusion(r, self.mask, gray, cfg) is RoiState.TRACKING
                else replace(r, state=RoiState.STOPPED, current_point=None) for r in rois]
        try:
            est = estimate_pose_ransac(rois, cfg, self._rng)
        except (TooFewRoisError, NoConsensusError):
            est = replace(self.last_estimate, stale=True)
        else:
            rois = reinitialize_rois(rois, est, gray, self.mask, self.camera, cfg)
            self.last_estimate = est
        self.rois = rois
        self._prev = gray
        return est


def tracker_step(frame, tracker: TissueTracker) -> TissuePoseEstimate:
    return tracker.step(frame)


def log_record(index: int, t: float, estimate: TissuePoseEstimate, rois: Sequence[Roi]) -> dict:
    return {
        "frame": index,
        "t": t,
        "pose": estimate.transform.as_row12(),
        "inliers": estimate.inlier_count,
        "residual_mm": estimate.mean_inlier_residual_mm,
        "stale": estimate.stale,
        "rois": [{"id": r.id, "state": r.state.value, "u": r.u, "v": r.v} for r in rois],
    }


def write_log_line(fh: IO[str], record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
