"""Rigid transforms in millimetres, and the pose-error metric used by the experiments.

A :class:`RigidTransform` named ``a_T_b`` maps coordinates expressed in frame
``b`` into frame ``a``, so chains read left to right the way the frame
superscripts do: ``compose(base_T_ee, ee_T_marker)`` is ``base_T_marker``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

RENORMALIZE_EVERY = 100


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3, orthonormal, det +1) plus translation in mm."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if trans.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {trans.shape}")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> RigidTransform:
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_row12(cls, values: Sequence[float]) -> RigidTransform:
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (12,):
            raise ValueError(f"expected 12 numbers, got {v.shape}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def as_matrix(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_row12(self) -> list[float]:
        """9 row-major rotation entries followed by the translation."""
        return [float(x) for x in self.rotation.reshape(-1)] + [float(x) for x in self.translation]

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(np.allclose(r @ r.T, np.eye(3), atol=tol, rtol=0)
                    and abs(np.linalg.det(r) - 1.0) <= tol)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)


@dataclass(frozen=True)
class PoseError:
    translation_mm: float
    rotation_deg: float


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def apply(t: RigidTransform, p: ArrayLike) -> NDArray[np.float64]:
    """Map a point (or an (N, 3) stack of points)."""
    p = np.asarray(p, dtype=np.float64)
    return p @ t.rotation.T + t.translation


def rotate(t: RigidTransform, v: ArrayLike) -> NDArray[np.float64]:
    """Rotate a direction (or an (N, 3) stack) without translating it."""
    return np.asarray(v, dtype=np.float64) @ t.rotation.T


def rotation_angle_deg(r: NDArray[np.float64]) -> float:
    # atan2 form of arccos((trace - 1) / 2); stays accurate near 0 and 180 degrees
    cos_a = (np.trace(r) - 1.0) / 2.0
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_a = np.linalg.norm(axis) / 2.0
    return float(np.degrees(np.arctan2(sin_a, np.clip(cos_a, -1.0, 1.0))))


def pose_error(a: RigidTransform, b: RigidTransform) -> PoseError:
    return PoseError(
        translation_mm=float(np.linalg.norm(a.translation - b.translation)),
        rotation_deg=rotation_angle_deg(a.rotation.T @ b.rotation),
    )


def orthonormalize(r: ArrayLike) -> NDArray[np.float64]:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def renormalized(t: RigidTransform) -> RigidTransform:
    return RigidTransform(orthonormalize(t.rotation), t.translation)


def compose_chain(transforms: Iterable[RigidTransform],
                  renormalize_every: int = RENORMALIZE_EVERY) -> RigidTransform:
    """Left-to-right product, projecting back onto SO(3) every ``renormalize_every`` steps."""
    out = RigidTransform.identity()
    for i, t in enumerate(transforms, start=1):
        out = compose(out, t)
        if renormalize_every and i % renormalize_every == 0:
            out = renormalized(out)
    return out


def translate(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.eye(3), [x, y, z])


def axis_angle(axis: ArrayLike, angle_deg: float) -> NDArray[np.float64]:
    """Rodrigues rotation matrix about ``axis`` (need not be unit length)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    a = np.radians(angle_deg)
    return np.eye(3) + np.sin(a) * kx + (1.0 - np.cos(a)) * (kx @ kx)


def rot_x(angle_deg: float) -> RigidTransform:
    return RigidTransform(axis_angle([1, 0, 0], angle_deg), np.zeros(3))


def rot_y(angle_deg: float) -> RigidTransform:
    return RigidTransform(axis_angle([0, 1, 0], angle_deg), np.zeros(3))


def rot_z(angle_deg: float) -> RigidTransform:
    return RigidTransform(axis_angle([0, 0, 1], angle_deg), np.zeros(3))


def quaternion_to_matrix(q: ArrayLike) -> NDArray[np.float64]:
    """(w, x, y, z) quaternion, normalized internally."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng: np.random.Generator, translation_scale: float = 100.0) -> RigidTransform:
    """Uniformly random rotation (normalized Gaussian quaternion) and Gaussian translation."""
    return RigidTransform(quaternion_to_matrix(rng.normal(size=4)),
                          rng.normal(scale=translation_scale, size=3))
