import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tissuescan import _fallback, kernels
from tissuescan.se3 import rot_x, translate, compose

compiled = pytest.importorskip("tissuescan._kernels")


def test_dispatch_prefers_compiled():
    assert kernels.BACKEND == "compiled"
    assert kernels.ncc_surface is compiled.ncc_surface


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 12), st.integers(3, 12))
def test_ncc_surface_parity(seed, h, w):
    rng = np.random.default_rng(seed)
    search = rng.random((h + 9, w + 7))
    template = rng.random((h, w))
    np.testing.assert_allclose(compiled.ncc_surface(search, template),
                               _fallback.ncc_surface(search, template), atol=1e-9)


def test_ncc_surface_finds_template_exactly(rng):
    search = rng.random((60, 70))
    template = search[20:45, 31:51].copy()
    for impl in (compiled, _fallback):
        s = impl.ncc_surface(search, template)
        assert np.unravel_index(np.argmax(s), s.shape) == (20, 31)
        assert s.max() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.abs(s) <= 1 + 1e-12)


def test_ncc_surface_flat_template_scores_zero():
    search = np.random.default_rng(0).random((30, 30))
    for impl in (compiled, _fallback):
        assert not impl.ncc_surface(search, np.full((5, 5), 0.3)).any()
        with pytest.raises(ValueError):
            impl.ncc_surface(search[:4, :4], np.ones((5, 5)))


def test_raycast_parity():
    rng = np.random.default_rng(3)
    yy, xx = np.mgrid[0:120, 0:160] * 0.5
    heights = 2.0 * np.sin(xx / 9.0) * np.cos(yy / 7.0)
    albedo = 0.5 + 0.3 * rng.random(heights.shape)
    pose = compose(translate(-5, 3, 120), rot_x(20))
    args = (heights, albedo, -40.0, -30.0, 0.5, pose.rotation, pose.translation, 300.0, 300.0, 79.5, 59.5, 160, 120)
    pc, ac, vc = compiled.raycast_heightfield(*args)
    pf, af, vf = _fallback.raycast_heightfield(*args)
    vc, vf = vc.astype(bool), vf.astype(bool)
    # silhouette pixels may flip on the last iteration; the interior must agree
    assert (vc != vf).sum() <= 0.002 * vc.size
    both = vc & vf
    assert both.sum() > 0.5 * vc.size
    np.testing.assert_allclose(pc[both], pf[both], atol=1e-3)
    np.testing.assert_allclose(ac[both], af[both], atol=1e-3)


def test_shade_image_parity(rng):
    albedo = rng.random((40, 50))
    valid = (rng.random((40, 50)) > 0.3).astype(np.uint8)
    noise = rng.normal(0, 1, (40, 50, 3)).astype(np.float32)
    base = np.array([230.0, 120.0, 100.0])
    bg = np.array([25.0, 90.0, 40.0])
    for n in (noise, np.zeros((0, 0, 3), np.float32)):
        a = compiled.shade_image(albedo, valid, base, bg, n, 2.0)
        b = _fallback.shade_image(albedo, valid.astype(bool), base, bg, n, 2.0)
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("bounds", [(0, 50, 0.35, 1, 0.1, 1), (300, 30, 0.2, 1, 0, 1), (90, 150, 0, 0.5, 0.2, 0.9)])
def test_hsv_mask_parity(bounds, rng):
    rgb = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    rgb[0, 0] = (128, 128, 128)  # grey: zero saturation, hue defined as 0
    a = compiled.hsv_box_mask(rgb, *bounds).astype(bool)
    b = _fallback.hsv_box_mask(rgb, *bounds)
    np.testing.assert_array_equal(a, b)


def test_hsv_known_colours():
    rgb = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [200, 120, 60]]], dtype=np.uint8)
    hue, sat, val = _fallback.rgb_to_hsv(rgb)
    np.testing.assert_allclose(hue[0], [0, 120, 240, 60 * 60 / 140], atol=1e-9)
    np.testing.assert_allclose(sat[0], [1, 1, 1, 140 / 200])
    np.testing.assert_allclose(val[0], [1, 1, 1, 200 / 255])
