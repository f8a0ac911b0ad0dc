import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tissuescan.errors import DegenerateGeometryError, InsufficientTextureError, NoConsensusError, TooFewRoisError
from tissuescan.phantom import OCCLUDER, TISSUE, MotionProfile, Occluder, Scene, make_phantom
from tissuescan.se3 import (RigidTransform, apply, compose, inverse, pose_error, quaternion_to_matrix,
                            random_transform)
from tissuescan.surface import project
from tissuescan.tracker import (HIST_BINS, RoiState, TissueTracker, TrackerConfig, _optimal_rotation, as_gray,
                                check_occlusion, describe, estimate_pose_ransac, init_rois, kabsch_fit, log_record,
                                reinitialize_rois, segment_tissue, track_rois, tracker_step, write_log_line)

from conftest import make_rois, outlier_instance, scene_for

CFG = TrackerConfig()


@pytest.fixture(scope="module")
def static_frame():
    return scene_for(0, seed=0, noise_sigma_mm=0.0, image_noise=0.0).frame(0.0)


@pytest.fixture(scope="module")
def static_rois(static_frame):
    return init_rois(static_frame.image, segment_tissue(static_frame.image, CFG), static_frame.cloud, CFG)


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(roi_count=5)
    with pytest.raises(ValueError):
        TrackerConfig(ransac_inlier_threshold_mm=0)


def test_descriptor_histograms_are_normalized(rng):
    d = describe(rng.random((25, 20)))
    assert len(d.intensity_histogram) == HIST_BINS
    assert d.intensity_histogram.sum() == pytest.approx(1.0, abs=1e-6)
    assert d.keypoint_signature.sum() == pytest.approx(1.0, abs=1e-6)


# Segmentation and ROI selection

def test_segmentation_uniform_images():
    inside = np.full((20, 30, 3), (200, 110, 70), np.uint8)
    outside = np.full((20, 30, 3), (25, 90, 40), np.uint8)
    assert segment_tissue(inside, CFG).all()
    assert not segment_tissue(outside, CFG).any()
    assert segment_tissue(inside, CFG).shape == inside.shape[:2]


def test_segmentation_matches_labels():
    occ = Occluder(0.0, 5.0, ((150, 120), (420, 160), (380, 330), (170, 300)))
    f = scene_for(1, "x", seed=1, occluders=(occ,)).frame(0.4)
    mask = segment_tissue(f.image, CFG)
    assert (f.labels == OCCLUDER).any()
    assert np.mean(mask == (f.labels == TISSUE)) >= 0.99


# ROI initialization

def test_textureless_tissue_has_no_corners():
    flat = make_phantom(0, blob_count=0, texture_contrast=0.0)
    f = Scene(flat, MotionProfile(), seed=0).frame(0.0)
    with pytest.raises(InsufficientTextureError):
        init_rois(f.image, segment_tissue(f.image, CFG), f.cloud, CFG)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_rois_sit_on_blobs_and_do_not_overlap(seed):
    scene = scene_for(1, "x", seed=seed)
    f = scene.frame(0.0)
    rois = init_rois(f.image, segment_tissue(f.image, CFG), f.cloud, CFG)
    assert len(rois) == CFG.roi_count
    blobs = scene.blob_pixels(0.0)
    for roi in rois:
        assert np.hypot(*(blobs - roi.center).T).min() < 3.0
        u, v, w, h = roi.rect
        assert (f.labels[v:v + h, u:u + w] == TISSUE).all()
    for i, a in enumerate(rois):
        for b in rois[i + 1:]:
            (au, av, aw, ah), (bu, bv, bw, bh) = a.rect, b.rect
            assert au + aw <= bu or bu + bw <= au or av + ah <= bv or bv + bh <= av


# ROI tracking

def test_static_scene_rects_do_not_move(static_frame, static_rois):
    moved = track_rois(static_frame.image, static_frame.image, static_rois, CFG, cloud=static_frame.cloud)
    for a, b in zip(static_rois, moved):
        assert b.tracking and (b.u, b.v) == (a.u, a.v)
        np.testing.assert_allclose(b.current_point, a.reference_point)


def test_global_shift_moves_every_rect(static_frame, static_rois):
    shifted = np.roll(static_frame.image, (-3, 5), axis=(0, 1))
    moved = track_rois(static_frame.image, shifted, static_rois, CFG)
    for a, b in zip(static_rois, moved):
        assert b.tracking
        assert abs(b.u - a.u - 5) <= 1 and abs(b.v - a.v + 3) <= 1


def _cover(image, mask, rect, rows=None):
    img, m = image.copy(), mask.copy()
    u, v, w, h = rect
    r = slice(v, v + (h if rows is None else rows))
    img[r, u:u + w] = 200
    m[r, u:u + w] = False
    return img, m


def test_patch_replaced_by_occluder_is_stopped(static_frame, static_rois):
    noisy = scene_for(0, seed=0).frame(0.0).image
    img, _ = _cover(noisy, np.ones(noisy.shape[:2], bool), static_rois[0].rect)
    moved = track_rois(None, img, static_rois, CFG)
    assert moved[0].state is RoiState.STOPPED
    assert all(r.tracking for r in moved[1:])


# Occlusion gating

def test_check_occlusion_cases(static_frame, static_rois):
    mask = segment_tissue(static_frame.image, CFG)
    roi = static_rois[0]
    assert check_occlusion(roi, mask, static_frame.image, CFG) is RoiState.TRACKING
    img, m = _cover(static_frame.image, mask, roi.rect)
    assert check_occlusion(roi, m, img, CFG) is RoiState.STOPPED
    # 40 % of the rows covered leaves a tissue fraction of exactly 0.6
    img, m = _cover(static_frame.image, mask, roi.rect, rows=10)
    u, v, w, h = roi.rect
    assert m[v:v + h, u:u + w].mean() == pytest.approx(0.6)
    assert check_occlusion(roi, m, img, CFG) is RoiState.STOPPED


# Rigid pose estimation

def test_kabsch_identity_and_translation(rng):
    p = rng.normal(size=(6, 3)) * 20
    ident = kabsch_fit(p, p)
    np.testing.assert_allclose(ident.as_matrix(), np.eye(4), atol=1e-12)
    t = kabsch_fit(p, p + [2, 0, 0])
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, [2, 0, 0], atol=1e-12)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_kabsch_recovers_constructed_motion(seed):
    rng = np.random.default_rng(seed)
    truth = random_transform(rng)
    p = rng.normal(scale=30.0, size=(3, 3))
    fit = kabsch_fit(p, apply(truth, p))
    np.testing.assert_allclose(fit.rotation, truth.rotation, atol=1e-9)
    np.testing.assert_allclose(fit.translation, truth.translation, atol=1e-9)


def test_kabsch_reflection_trap():
    # planar triple matched to its mirror image: the unconstrained optimum is a reflection
    p = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
    q = p[:, [1, 0, 2]]  # swap x and y
    c = p - p.mean(0)
    _, flipped = _optimal_rotation(c.T @ (q - q.mean(0)))
    assert flipped
    fit = kabsch_fit(p, q)
    assert np.linalg.det(fit.rotation) == pytest.approx(1.0)
    assert fit.is_valid()


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_kabsch_rotation_is_proper_even_for_mirrored_sets(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(scale=10.0, size=(int(rng.integers(3, 8)), 3))
    if rng.random() < 0.5:
        p[:, 2] = 0.0
    q = p * [1.0, 1.0, -1.0] if rng.random() < 0.5 else p[:, [1, 0, 2]]
    fit = kabsch_fit(p, q)
    assert np.linalg.det(fit.rotation) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(fit.rotation @ fit.rotation.T, np.eye(3), atol=1e-9)


def test_kabsch_degenerate_inputs():
    line = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2.0]])
    with pytest.raises(DegenerateGeometryError):
        kabsch_fit(line, line)
    with pytest.raises(DegenerateGeometryError):
        kabsch_fit(line[:2], line[:2])
    with pytest.raises(ValueError):
        kabsch_fit(np.zeros((4, 3)), np.zeros((3, 3)))


def _residual(t, p, q):
    return float(np.sum((apply(t, p) - q) ** 2))


def brute_force_best(rng, p, q, candidates=10_000):
    """Lowest residual among random rigid motions near the centroid-aligned identity."""
    best = np.inf
    dc = q.mean(0) - p.mean(0)
    for _ in range(candidates):
        r = quaternion_to_matrix(np.r_[1.0, rng.normal(scale=0.3, size=3)])
        t = dc + p.mean(0) - r @ p.mean(0) + rng.normal(scale=0.5, size=3)
        best = min(best, _residual(RigidTransform(r, t), p, q))
    return best


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 5))
def test_kabsch_beats_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.normal(scale=10.0, size=(n, 3))
    q = apply(RigidTransform(quaternion_to_matrix(np.r_[1.0, rng.normal(scale=0.2, size=3)]), [1, 2, 3]), p) \
        + rng.normal(scale=0.5, size=(n, 3))
    assert _residual(kabsch_fit(p, q), p, q) <= brute_force_best(rng, p, q) + 1e-9


def test_ransac_exact_recovery(rng):
    truth, ref, cur, _ = outlier_instance(rng, outlier_fraction=0.0, sigma=0.0)
    est = estimate_pose_ransac(make_rois(ref, cur), CFG, rng)
    assert est.inlier_count == CFG.roi_count
    e = pose_error(est.transform, truth)
    assert e.translation_mm < 1e-9 and e.rotation_deg < 1e-9


def test_ransac_rejects_outliers(rng):
    truth, ref, cur, bad = outlier_instance(rng, sigma=0.0)
    est = estimate_pose_ransac(make_rois(ref, cur), CFG, rng)
    e = pose_error(est.transform, truth)
    assert e.translation_mm < 0.1 and e.rotation_deg < 0.1
    assert not set(bad) & set(est.inliers)


def test_ransac_failure_modes(rng):
    truth, ref, cur, _ = outlier_instance(rng, n=6, outlier_fraction=0.0, sigma=0.0)
    with pytest.raises(TooFewRoisError):
        estimate_pose_ransac(make_rois(ref, cur, stopped={0, 1, 2, 3}), CFG, rng)
    scattered = cur + rng.normal(scale=40.0, size=cur.shape)
    with pytest.raises(NoConsensusError):
        estimate_pose_ransac(make_rois(ref, scattered), replace(CFG, ransac_inlier_threshold_mm=0.01), rng)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(6, 20))
def test_ransac_invariant_to_roi_order(seed, n):
    rng = np.random.default_rng(seed)
    _, ref, cur, _ = outlier_instance(rng, n=n)
    perm = rng.permutation(n)
    a = estimate_pose_ransac(make_rois(ref, cur), CFG, np.random.default_rng(1))
    b = estimate_pose_ransac(make_rois(ref[perm], cur[perm]), CFG, np.random.default_rng(1))
    assert a.inlier_count >= 3
    np.testing.assert_allclose(a.transform.as_matrix(), b.transform.as_matrix(), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(8, 24))
def test_deleting_stopped_rois_is_bit_identical(seed, n):
    rng = np.random.default_rng(seed)
    _, ref, cur, _ = outlier_instance(rng, n=n)
    stopped = set(rng.choice(n, n // 3, replace=False).tolist())
    rois = make_rois(ref, cur, stopped=stopped)
    kept = [r for r in rois if r.tracking]
    a = estimate_pose_ransac(rois, CFG, np.random.default_rng(seed))
    b = estimate_pose_ransac(kept, CFG, np.random.default_rng(seed))
    assert a.transform.as_row12() == b.transform.as_row12()
    assert (a.inlier_count, a.mean_inlier_residual_mm, a.inliers) == (b.inlier_count, b.mean_inlier_residual_mm,
                                                                      b.inliers)
    assert not stopped & set(a.inliers)


# Reinitialization

def test_reinit_at_original_rect_when_tissue_is_back(static_frame, static_rois):
    mask = segment_tissue(static_frame.image, CFG)
    stopped = [replace(r, state=RoiState.STOPPED, current_point=None) for r in static_rois[:4]]
    ident = estimate_pose_ransac(static_rois, CFG, np.random.default_rng(0))
    back = reinitialize_rois(stopped, ident, static_frame.image, mask, scene_for(0).camera, CFG)
    for a, b in zip(static_rois, back):
        assert b.tracking and abs(b.u - a.u) <= 1 and abs(b.v - a.v) <= 1


def test_reinit_onto_occluder_stays_stopped(static_frame, static_rois):
    mask = segment_tissue(static_frame.image, CFG)
    roi = replace(static_rois[0], state=RoiState.STOPPED, current_point=None)
    img, m = _cover(static_frame.image, mask, roi.rect)
    ident = estimate_pose_ransac(static_rois, CFG, np.random.default_rng(0))
    assert not reinitialize_rois([roi], ident, img, m, scene_for(0).camera, CFG)[0].tracking


def test_reinit_follows_tissue_motion():
    scene = scene_for(1, "x", seed=0)
    tracker = TissueTracker(scene.camera, seed=0)
    tracker.initialize(scene.frame(0.0))
    tracker.rois = [replace(r, state=RoiState.STOPPED, current_point=None) if r.id < 4 else r
                    for r in tracker.rois]
    t = 0.75
    est = tracker.step(scene.frame(t))
    gt = compose(scene.pose_at(t), inverse(scene.pose_at(0.0)))
    for roi in tracker.rois[:4]:
        assert roi.tracking
        target = project(scene.camera, gt, roi.reference_point)
        assert np.hypot(roi.center[0] - target[0], roi.center[1] - target[1]) < 2.0
    assert pose_error(est.transform, gt).translation_mm < 1.0


# Whole loop

def test_reference_frame_fed_back_gives_identity(static_frame):
    tracker = TissueTracker(scene_for(0).camera, seed=0)
    tracker.initialize(static_frame)
    est = tracker_step(static_frame, tracker)
    assert all(r.tracking for r in tracker.rois)
    assert est.inlier_count == CFG.roi_count and not est.stale
    np.testing.assert_allclose(est.transform.as_matrix(), np.eye(4), atol=1e-9)


def _run(scene, times, seed=3):
    tracker = TissueTracker(scene.camera, seed=seed)
    tracker.initialize(scene.frame(0.0))
    return [tracker.step(scene.frame(t)).transform.as_row12() for t in times]


def test_tracker_is_deterministic():
    scene = scene_for(3, "free", seed=2)
    times = [0.1, 0.2, 0.3, 0.4]
    assert _run(scene, times) == _run(scene, times)


def test_full_occlusion_returns_stale_previous_estimate():
    scene = scene_for(1, "y", seed=0)
    tracker = TissueTracker(scene.camera, seed=0)
    tracker.initialize(scene.frame(0.0))
    good = tracker.step(scene.frame(0.1))
    blind = scene_for(1, "y", seed=0, occluders=(Occluder(0.0, 9.0, ((0, 0), (720, 0), (720, 576), (0, 576))),))
    est = tracker.step(blind.frame(0.2))
    assert est.stale and est.transform.as_row12() == good.transform.as_row12()
    assert not any(r.tracking for r in tracker.rois)


def test_log_line_round_trip(static_frame, static_rois):
    est = estimate_pose_ransac(static_rois, CFG, np.random.default_rng(0))
    fh = io.StringIO()
    write_log_line(fh, log_record(3, 0.3, est, static_rois))
    rec = json.loads(fh.getvalue())
    assert rec["frame"] == 3 and len(rec["pose"]) == 12 and len(rec["rois"]) == CFG.roi_count
    assert {r["state"] for r in rec["rois"]} == {"tracking"}


def test_as_gray_range(static_frame):
    g = as_gray(static_frame.image)
    assert g.shape == static_frame.image.shape[:2] and 0.0 <= g.min() and g.max() <= 1.0
