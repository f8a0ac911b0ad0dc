"""Organized point clouds: pinhole projection, pixel lookup and surface normals.

Pixel coordinates are ``(u, v)`` = (column, row); grids are indexed ``[v, u]``.
Points are in millimetres in the rectified left-camera frame (x right,
y down, z forward).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from tissuescan.errors import BehindCameraError, InvalidPixelError
from tissuescan.se3 import RigidTransform, apply

DEFAULT_WIDTH = 720
DEFAULT_HEIGHT = 576

_GRID_MAGIC = b"OPCG"
_GRID_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class CameraIntrinsics:
    projection: NDArray[np.float64]
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT

    def __post_init__(self) -> None:
        p = np.array(self.projection, dtype=np.float64)
        if p.shape != (3, 4):
            raise ValueError(f"projection must be 3x4, got {p.shape}")
        if p[0, 0] <= 0 or p[1, 1] <= 0 or p[1, 0] != 0 or p[2, 0] != 0 or p[2, 1] != 0:
            raise ValueError("projection needs positive focal lengths and upper-triangular K")
        p.setflags(write=False)
        object.__setattr__(self, "projection", p)

    @classmethod
    def pinhole(cls, fx: float, fy: float, cx: float, cy: float,
                width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> CameraIntrinsics:
        p = np.array([[fx, 0.0, cx, 0.0], [0.0, fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
        return cls(p, width, height)

    @property
    def fx(self) -> float:
        return float(self.projection[0, 0])

    @property
    def fy(self) -> float:
        return float(self.projection[1, 1])

    @property
    def cx(self) -> float:
        return float(self.projection[0, 2])

    @property
    def cy(self) -> float:
        return float(self.projection[1, 2])

    def ray(self, u: float, v: float) -> NDArray[np.float64]:
        """Direction through pixel (u, v), scaled to unit depth."""
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics.pinhole(700.0, 700.0, (DEFAULT_WIDTH - 1) / 2, (DEFAULT_HEIGHT - 1) / 2)


@dataclass(frozen=True)
class OrganizedPointCloud:
    points: NDArray[np.float64]  # (H, W, 3)
    valid: NDArray[np.bool_]  # (H, W)

    def __post_init__(self) -> None:
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"points must be (H, W, 3), got {self.points.shape}")
        if self.valid.shape != self.points.shape[:2]:
            raise ValueError("validity grid does not match the point grid")

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class NormalMap:
    normals: NDArray[np.float64]  # (H, W, 3), unit where valid
    valid: NDArray[np.bool_]


def project(k: CameraIntrinsics, m: RigidTransform, p: ArrayLike) -> tuple[float, float]:
    """Pixel of point ``p`` after motion ``m``: s [u v 1]^T = K M p."""
    q = k.projection @ np.append(apply(m, p), 1.0)
    if q[2] <= 0:
        raise BehindCameraError(f"point has non-positive depth {q[2]:.3f} mm")
    return float(q[0] / q[2]), float(q[1] / q[2])


def project_points(k: CameraIntrinsics, points: ArrayLike) -> NDArray[np.float64]:
    """Vectorized identity-motion projection of an (..., 3) array; NaN behind the camera."""
    p = np.asarray(points, dtype=np.float64)
    q = p @ k.projection[:, :3].T + k.projection[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = q[..., :2] / q[..., 2:3]
    uv[q[..., 2] <= 0] = np.nan
    return uv


def _box_point(cloud: OrganizedPointCloud, u: int, v: int, window: int) -> NDArray[np.float64]:
    r = window // 2
    if u - r < 0 or v - r < 0 or u + r >= cloud.width or v + r >= cloud.height:
        raise InvalidPixelError(f"pixel ({u}, {v}) window leaves the image")
    block = cloud.valid[v - r:v + r + 1, u - r:u + r + 1]
    if not block.all():
        raise InvalidPixelError(f"no depth near pixel ({u}, {v})")
    return cloud.points[v - r:v + r + 1, u - r:u + r + 1].reshape(-1, 3).mean(axis=0)


def point_at_pixel(cloud: OrganizedPointCloud, u: float, v: float, window: int = 1) -> NDArray[np.float64]:
    """3D point at (u, v), bilinear between the four neighbours for fractional pixels.

    ``window > 1`` (odd) averages a window x window block around each neighbour
    first, which trades a little resolution for depth-noise suppression.
    """
    if not (0 <= u <= cloud.width - 1 and 0 <= v <= cloud.height - 1):
        raise InvalidPixelError(f"pixel ({u}, {v}) outside the image")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    a, b = u - u0, v - v0
    out = np.zeros(3)
    for du, dv, wgt in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)),
                        (0, 1, (1 - a) * b), (1, 1, a * b)):
        if wgt == 0.0:
            continue
        out += wgt * _box_point(cloud, u0 + du, v0 + dv, window)
    return out


def smooth_cloud(cloud: OrganizedPointCloud, size: int = 3) -> OrganizedPointCloud:
    """Box-average each point over a size x size block; valid only if the whole block is."""
    r = size // 2
    h, w = cloud.valid.shape
    pts = np.where(cloud.valid[..., None], cloud.points, 0.0)
    acc = np.zeros((h - 2 * r, w - 2 * r, 3))
    ok = np.ones((h - 2 * r, w - 2 * r), dtype=bool)
    for dv in range(size):
        for du in range(size):
            acc += pts[dv:dv + h - 2 * r, du:du + w - 2 * r]
            ok &= cloud.valid[dv:dv + h - 2 * r, du:du + w - 2 * r]
    points = np.zeros_like(cloud.points)
    valid = np.zeros_like(cloud.valid)
    points[r:h - r, r:w - r] = acc / (size * size)
    valid[r:h - r, r:w - r] = ok
    points[~valid] = 0.0
    return OrganizedPointCloud(points, valid)


def estimate_normals(cloud: OrganizedPointCloud, span: int = 2, smooth: int = 3) -> NormalMap:
    """Normals from the cross product of central differences along u and v.

    The grid is box-smoothed first; each derivative spans ``2 * span + 1``
    pixels. Pixels whose stencil touches an invalid point are invalid.
    Normals are flipped to face the camera (negative dot with the view ray).
    """
    sm = smooth_cloud(cloud, smooth) if smooth > 1 else cloud
    p, ok = sm.points, sm.valid
    h, w = ok.shape
    s = span
    normals = np.zeros_like(p)
    valid = np.zeros_like(ok)
    if h <= 2 * s or w <= 2 * s:
        return NormalMap(normals, valid)
    du = p[s:h - s, 2 * s:] - p[s:h - s, :w - 2 * s]
    dv = p[2 * s:, s:w - s] - p[:h - 2 * s, s:w - s]
    stencil = (ok[s:h - s, 2 * s:] & ok[s:h - s, :w - 2 * s]
               & ok[2 * s:, s:w - s] & ok[:h - 2 * s, s:w - s] & ok[s:h - s, s:w - s])
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    stencil &= norm > 0
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    facing = np.einsum("ijk,ijk->ij", n, p[s:h - s, s:w - s])
    n = np.where((facing > 0)[..., None], -n, n)
    normals[s:h - s, s:w - s] = np.where(stencil[..., None], n, 0.0)
    valid[s:h - s, s:w - s] = stencil
    return NormalMap(normals, valid)


def save_cloud(path: str | Path, cloud: OrganizedPointCloud) -> None:
    """Binary grid: magic 'OPCG', uint32 width, uint32 height (little-endian),
    then H*W*3 float32 points row-major, then H*W validity bytes."""
    h, w = cloud.valid.shape
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(_GRID_MAGIC, w, h))
        fh.write(cloud.points.astype("<f4").tobytes())
        fh.write(cloud.valid.astype(np.uint8).tobytes())


def load_cloud(path: str | Path) -> OrganizedPointCloud:
    data = Path(path).read_bytes()
    magic, w, h = _GRID_HEADER.unpack_from(data)
    if magic != _GRID_MAGIC:
        raise ValueError(f"{path}: not an organized point-cloud grid")
    off = _GRID_HEADER.size
    n = w * h
    expected = off + 12 * n + n
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    pts = np.frombuffer(data, dtype="<f4", count=3 * n, offset=off).reshape(h, w, 3)
    valid = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + 12 * n).reshape(h, w)
    return OrganizedPointCloud(pts.astype(np.float64), valid.astype(bool))
