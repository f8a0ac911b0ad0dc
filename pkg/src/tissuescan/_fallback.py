"""Pure-numpy versions of the compiled kernels (same signatures and outputs)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _integral(a):
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(0).cumsum(1)
    return out


def _box_sums(integ, h, w):
    return integ[h:, w:] - integ[:-h, w:] - integ[h:, :-w] + integ[:-h, :-w]


def ncc_surface(search, template):
    search = np.ascontiguousarray(search, dtype=np.float64)
    template = np.ascontiguousarray(template, dtype=np.float64)
    h, w = template.shape
    if h > search.shape[0] or w > search.shape[1]:
        raise ValueError("template larger than search region")
    n = float(h * w)
    tz = template - template.mean()
    tnorm = np.sqrt((tz * tz).sum())
    out_shape = (search.shape[0] - h + 1, search.shape[1] - w + 1)
    if tnorm <= 1e-12:
        return np.zeros(out_shape)
    s = _box_sums(_integral(search), h, w)
    s2 = _box_sums(_integral(search * search), h, w)
    var = s2 - s * s / n
    windows = sliding_window_view(search, (h, w))
    cross = np.einsum("ijkl,kl->ij", windows, tz)
    ok = var > 1e-12 * n
    out = np.zeros(out_shape)
    out[ok] = cross[ok] / (tnorm * np.sqrt(var[ok]))
    return out


def _bilinear(grid, gx, gy):
    ny, nx = grid.shape
    gx = np.clip(gx, 0.0, nx - 1)
    gy = np.clip(gy, 0.0, ny - 1)
    i = np.minimum(np.floor(gx).astype(np.intp), nx - 2)
    j = np.minimum(np.floor(gy).astype(np.intp), ny - 2)
    a = gx - i
    b = gy - j
    return ((1 - a) * (1 - b) * grid[j, i] + a * (1 - b) * grid[j, i + 1]
            + (1 - a) * b * grid[j + 1, i] + a * b * grid[j + 1, i + 1])


def raycast_heightfield(heights, albedo, x0, y0, spacing, rotation, translation,
                        fx, fy, cx, cy, width, height, depth_noise=None,
                        iterations=60, tol=1e-9):
    R = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    ny, nx = heights.shape
    vv, uu = np.mgrid[0:height, 0:width].astype(np.float64)
    rays = np.stack([(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu)], axis=-1)
    d = rays @ R  # R^T applied to each ray
    o = -R.T @ t
    dz = d[..., 2]
    usable = dz > 1e-9
    dz_safe = np.where(usable, dz, 1.0)
    lam = -o[2] / dz_safe
    for _ in range(iterations):
        x = o[0] + lam * d[..., 0]
        y = o[1] + lam * d[..., 1]
        lam_new = (_bilinear(heights, (x - x0) / spacing, (y - y0) / spacing) - o[2]) / dz_safe
        done = np.abs(lam_new - lam) < tol
        lam = lam_new
        if done[usable].all():
            break
    x = o[0] + lam * d[..., 0]
    y = o[1] + lam * d[..., 1]
    xmax = x0 + (nx - 1) * spacing
    ymax = y0 + (ny - 1) * spacing
    valid = usable & (lam > 0) & (x >= x0) & (x <= xmax) & (y >= y0) & (y <= ymax)
    z = _bilinear(heights, (x - x0) / spacing, (y - y0) / spacing)
    local = np.stack([x, y, z], axis=-1)
    points = local @ R.T + t
    if depth_noise is not None:
        z = np.where(valid, points[..., 2], 1.0)
        points = points * ((z + depth_noise) / z)[..., None]
    points[~valid] = 0.0
    alb = np.where(valid, _bilinear(albedo, (x - x0) / spacing, (y - y0) / spacing), 0.0)
    return points, alb, valid


def shade_image(albedo, valid, base_rgb, background_rgb, noise, noise_scale):
    img = np.where(valid[..., None], albedo[..., None] * np.asarray(base_rgb),
                   np.asarray(background_rgb, dtype=np.float64))
    if noise.shape[0] > 0:
        img = img + noise_scale * noise.astype(np.float64)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def rgb_to_hsv(rgb):
    """Hue in degrees, saturation and value in [0, 1]."""
    c = rgb.astype(np.float64) / 255.0
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    mx = c.max(axis=-1)
    mn = c.min(axis=-1)
    delta = mx - mn
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(mx == r, 60.0 * ((g - b) / safe),
                   np.where(mx == g, 60.0 * ((b - r) / safe) + 120.0,
                            60.0 * ((r - g) / safe) + 240.0))
    hue = np.where(delta > 0, hue, 0.0)
    hue = np.where(hue < 0, hue + 360.0, hue)
    return hue, sat, mx


def hsv_box_mask(rgb, h_lo, h_hi, s_lo, s_hi, v_lo, v_hi):
    hue, sat, val = rgb_to_hsv(np.asarray(rgb))
    if h_lo > h_hi:
        hue_ok = (hue >= h_lo) | (hue <= h_hi)
    else:
        hue_ok = (hue >= h_lo) & (hue <= h_hi)
    return hue_ok & (sat >= s_lo) & (sat <= s_hi) & (val >= v_lo) & (val <= v_hi)
