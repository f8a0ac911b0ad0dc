# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: ROI block matching, heightfield ray casting, HSV gating.

Each function mirrors a numpy implementation in ``_fallback`` with the same
signature and output; ``tissuescan.kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, fabs

cnp.import_array()


def ncc_surface(const double[:, ::1] search, const double[:, ::1] template):
    cdef Py_ssize_t hs = search.shape[0], ws = search.shape[1]
    cdef Py_ssize_t h = template.shape[0], w = template.shape[1]
    if h > hs or w > ws:
        raise ValueError("template larger than search region")
    cdef Py_ssize_t oh = hs - h + 1, ow = ws - w + 1
    cdef Py_ssize_t i, j, k, l
    cdef double n = <double>(h * w)
    cdef double tmean = 0.0, tnorm = 0.0, cross, s, s2, var

    out_arr = np.zeros((oh, ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    tz_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] tz = tz_arr
    integ_arr = np.zeros((hs + 1, ws + 1), dtype=np.float64)
    integ2_arr = np.zeros((hs + 1, ws + 1), dtype=np.float64)
    cdef double[:, ::1] integ = integ_arr
    cdef double[:, ::1] integ2 = integ2_arr

    for k in range(h):
        for l in range(w):
            tmean += template[k, l]
    tmean /= n
    for k in range(h):
        for l in range(w):
            tz[k, l] = template[k, l] - tmean
            tnorm += tz[k, l] * tz[k, l]
    tnorm = sqrt(tnorm)
    if tnorm <= 1e-12:
        return out_arr

    for i in range(hs):
        for j in range(ws):
            integ[i + 1, j + 1] = search[i, j] + integ[i, j + 1] + integ[i + 1, j] - integ[i, j]
            integ2[i + 1, j + 1] = (search[i, j] * search[i, j] + integ2[i, j + 1]
                                    + integ2[i + 1, j] - integ2[i, j])

    for i in range(oh):
        for j in range(ow):
            s = integ[i + h, j + w] - integ[i, j + w] - integ[i + h, j] + integ[i, j]
            s2 = integ2[i + h, j + w] - integ2[i, j + w] - integ2[i + h, j] + integ2[i, j]
            var = s2 - s * s / n
            if var <= 1e-12 * n:
                continue
            cross = 0.0
            for k in range(h):
                for l in range(w):
                    cross = cross + tz[k, l] * search[i + k, j + l]
            out[i, j] = cross / (tnorm * sqrt(var))
    return out_arr


cdef inline double _bilinear(const double[:, ::1] grid, double gx, double gy) nogil:
    cdef Py_ssize_t ny = grid.shape[0], nx = grid.shape[1]
    cdef Py_ssize_t i, j
    cdef double a, b
    if gx < 0.0:
        gx = 0.0
    elif gx > nx - 1:
        gx = nx - 1
    if gy < 0.0:
        gy = 0.0
    elif gy > ny - 1:
        gy = ny - 1
    i = <Py_ssize_t>floor(gx)
    j = <Py_ssize_t>floor(gy)
    if i > nx - 2:
        i = nx - 2
    if j > ny - 2:
        j = ny - 2
    a = gx - i
    b = gy - j
    return ((1.0 - a) * (1.0 - b) * grid[j, i] + a * (1.0 - b) * grid[j, i + 1]
            + (1.0 - a) * b * grid[j + 1, i] + a * b * grid[j + 1, i + 1])


cdef inline double _bilinear_grad(const double[:, ::1] grid, double gx, double gy,
                                  double* ddx, double* ddy) nogil:
    # value plus partial derivatives in grid units; zero slope where clamped
    cdef Py_ssize_t ny = grid.shape[0], nx = grid.shape[1]
    cdef Py_ssize_t i, j
    cdef double a, b, g00, g01, g10, g11
    cdef bint cx = False, cy = False
    if gx < 0.0:
        gx = 0.0
        cx = True
    elif gx > nx - 1:
        gx = nx - 1
        cx = True
    if gy < 0.0:
        gy = 0.0
        cy = True
    elif gy > ny - 1:
        gy = ny - 1
        cy = True
    i = <Py_ssize_t>floor(gx)
    j = <Py_ssize_t>floor(gy)
    if i > nx - 2:
        i = nx - 2
    if j > ny - 2:
        j = ny - 2
    a = gx - i
    b = gy - j
    g00 = grid[j, i]
    g01 = grid[j, i + 1]
    g10 = grid[j + 1, i]
    g11 = grid[j + 1, i + 1]
    ddx[0] = 0.0 if cx else (1.0 - b) * (g01 - g00) + b * (g11 - g10)
    ddy[0] = 0.0 if cy else (1.0 - a) * (g10 - g00) + a * (g11 - g01)
    return (1.0 - a) * (1.0 - b) * g00 + a * (1.0 - b) * g01 + (1.0 - a) * b * g10 + a * b * g11


def raycast_heightfield(const double[:, ::1] heights, const double[:, ::1] albedo,
                        double x0, double y0, double spacing,
                        const double[:, ::1] rotation, const double[::1] translation,
                        double fx, double fy, double cx, double cy,
                        int width, int height, depth_noise=None,
                        int iterations=30, double tol=1e-4):
    cdef Py_ssize_t ny = heights.shape[0], nx = heights.shape[1]
    cdef double xmax = x0 + (nx - 1) * spacing, ymax = y0 + (ny - 1) * spacing
    cdef double ox, oy, oz, dx, dy, dz, rx, ry, lam, step, x, y, z, hv, hx, hy, slope
    cdef double lam_prev = -1.0, scale, hmin, hmax, la, lb, xa, xb, ya, yb
    x = y = z = 0.0
    cdef Py_ssize_t u, v
    cdef int it
    cdef const double[:, ::1] R = rotation
    cdef const double[:, ::1] noise
    cdef bint noisy = depth_noise is not None

    points_arr = np.zeros((height, width, 3), dtype=np.float64)
    alb_arr = np.zeros((height, width), dtype=np.float64)
    valid_arr = np.zeros((height, width), dtype=np.uint8)
    cdef double[:, :, ::1] points = points_arr
    cdef double[:, ::1] alb = alb_arr
    cdef unsigned char[:, ::1] valid = valid_arr
    if noisy:
        noise = depth_noise
        if noise.shape[0] != height or noise.shape[1] != width:
            raise ValueError("depth_noise must be (height, width)")

    # camera origin in the surface frame: -R^T t
    ox = -(R[0, 0] * translation[0] + R[1, 0] * translation[1] + R[2, 0] * translation[2])
    oy = -(R[0, 1] * translation[0] + R[1, 1] * translation[1] + R[2, 1] * translation[2])
    oz = -(R[0, 2] * translation[0] + R[1, 2] * translation[1] + R[2, 2] * translation[2])

    hmin = np.min(heights)
    hmax = np.max(heights)
    with nogil:
        for v in range(height):
            ry = (v - cy) / fy
            lam_prev = -1.0
            for u in range(width):
                rx = (u - cx) / fx
                dx = R[0, 0] * rx + R[1, 0] * ry + R[2, 0]
                dy = R[0, 1] * rx + R[1, 1] * ry + R[2, 1]
                dz = R[0, 2] * rx + R[1, 2] * ry + R[2, 2]
                if dz <= 1e-9:
                    lam_prev = -1.0
                    continue
                # skip rays whose span between the height extremes misses the patch
                la = (hmin - oz) / dz
                lb = (hmax - oz) / dz
                xa = ox + la * dx
                xb = ox + lb * dx
                ya = oy + la * dy
                yb = oy + lb * dy
                if ((xa < x0 and xb < x0) or (xa > xmax and xb > xmax)
                        or (ya < y0 and yb < y0) or (ya > ymax and yb > ymax)):
                    lam_prev = -1.0
                    continue
                lam = lam_prev if lam_prev > 0.0 else -oz / dz
                # Newton on o_z + lam d_z - h(o_xy + lam d_xy) = 0; the last evaluated
                # (x, y, h) is kept, so the point is exactly on the surface and only
                # its sub-pixel landing depends on the tolerance
                for it in range(iterations):
                    x = ox + lam * dx
                    y = oy + lam * dy
                    z = _bilinear_grad(heights, (x - x0) / spacing, (y - y0) / spacing, &hx, &hy)
                    slope = dz - (hx * dx + hy * dy) / spacing
                    if slope < 0.1 * dz:
                        slope = dz
                    step = (oz + lam * dz - z) / slope
                    if fabs(step) < tol:
                        break
                    lam = lam - step
                if lam <= 0.0 or x < x0 or x > xmax or y < y0 or y > ymax:
                    lam_prev = -1.0
                    continue
                lam_prev = lam
                points[v, u, 0] = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + translation[0]
                points[v, u, 1] = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + translation[1]
                points[v, u, 2] = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + translation[2]
                if noisy:
                    scale = (points[v, u, 2] + noise[v, u]) / points[v, u, 2]
                    points[v, u, 0] *= scale
                    points[v, u, 1] *= scale
                    points[v, u, 2] *= scale
                alb[v, u] = _bilinear(albedo, (x - x0) / spacing, (y - y0) / spacing)
                valid[v, u] = 1
    return points_arr, alb_arr, valid_arr.view(np.bool_)


def shade_image(const double[:, ::1] albedo, const unsigned char[:, ::1] valid,
                const double[::1] base_rgb, const double[::1] background_rgb,
                const float[:, :, ::1] noise, double noise_scale):
    """Flat-shaded RGB: albedo * base colour on valid pixels, background elsewhere,
    plus ``noise_scale * noise``, rounded and clipped to uint8."""
    cdef Py_ssize_t H = albedo.shape[0], W = albedo.shape[1], i, j, c
    cdef double val
    cdef bint noisy = noise.shape[0] > 0
    if noisy and (noise.shape[0] != H or noise.shape[1] != W or noise.shape[2] != 3):
        raise ValueError("noise must be (H, W, 3) or empty")
    out_arr = np.empty((H, W, 3), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] out = out_arr
    with nogil:
        for i in range(H):
            for j in range(W):
                for c in range(3):
                    if valid[i, j]:
                        val = albedo[i, j] * base_rgb[c]
                    else:
                        val = background_rgb[c]
                    if noisy:
                        val = val + noise_scale * noise[i, j, c]
                    val = floor(val + 0.5)
                    if val < 0.0:
                        val = 0.0
                    elif val > 255.0:
                        val = 255.0
                    out[i, j, c] = <unsigned char>val
    return out_arr


def hsv_box_mask(const unsigned char[:, :, ::1] rgb, double h_lo, double h_hi,
                 double s_lo, double s_hi, double v_lo, double v_hi):
    cdef Py_ssize_t H = rgb.shape[0], W = rgb.shape[1], i, j
    cdef double r, g, b, mx, mn, hue, sat, val, delta
    cdef bint wrap = h_lo > h_hi, hue_ok
    mask_arr = np.zeros((H, W), dtype=np.uint8)
    cdef unsigned char[:, ::1] mask = mask_arr
    for i in range(H):
        for j in range(W):
            r = rgb[i, j, 0] / 255.0
            g = rgb[i, j, 1] / 255.0
            b = rgb[i, j, 2] / 255.0
            mx = r if r > g else g
            mx = mx if mx > b else b
            mn = r if r < g else g
            mn = mn if mn < b else b
            val = mx
            delta = mx - mn
            sat = delta / mx if mx > 0.0 else 0.0
            if delta <= 0.0:
                hue = 0.0
            elif mx == r:
                hue = 60.0 * ((g - b) / delta)
                if hue < 0.0:
                    hue += 360.0
            elif mx == g:
                hue = 60.0 * ((b - r) / delta) + 120.0
            else:
                hue = 60.0 * ((r - g) / delta) + 240.0
            if wrap:
                hue_ok = hue >= h_lo or hue <= h_hi
            else:
                hue_ok = h_lo <= hue <= h_hi
            if hue_ok and s_lo <= sat <= s_hi and v_lo <= val <= v_hi:
                mask[i, j] = 1
    return mask_arr.view(np.bool_)
