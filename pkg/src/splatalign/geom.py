"""Quaternions, rigid world-to-camera poses, and pinhole projection.

Conventions used throughout the package:
  * quaternions are (w, x, y, z); rotation conversions require unit norm
  * Pose maps world to camera: x_cam = R(q) @ x_world + t
  * pixel centers sit on the integer grid, u along columns, v along rows
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateQuaternionError

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        w, x, y, z = (float(v) for v in a)
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def is_unit(self, tol: float = UNIT_TOL) -> bool:
        return abs(self.norm() - 1.0) <= tol

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)


def quat_normalize(q: Quaternion) -> Quaternion:
    """Rescale to unit norm; raises DegenerateQuaternionError near zero."""
    n = q.norm()
    if n <= 1e-12:
        raise DegenerateQuaternionError(f"cannot normalize quaternion with norm {n:.3e}")
    return Quaternion(q.w / n, q.x / n, q.y / n, q.z / n)


def quat_multiply(a: Quaternion, b: Quaternion) -> Quaternion:
    """Hamilton product a * b."""
    return Quaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def _require_unit(q: Quaternion, what: str = "quaternion") -> None:
    if not q.is_unit():
        raise ValueError(f"{what} must be unit norm (|q| = {q.norm():.9f})")


def quat_to_rotmat(q: Quaternion) -> np.ndarray:
    """Convert a unit quaternion to a 3x3 rotation matrix."""
    _require_unit(q)
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quat_from_rotmat(R: np.ndarray) -> Quaternion:
    """Convert a 3x3 rotation matrix to a unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / math.sqrt(trace + 1.0)
        w = 0.25 / s
        x = (R[2, 1] - R[1, 2]) * s
        y = (R[0, 2] - R[2, 0]) * s
        z = (R[1, 0] - R[0, 1]) * s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_normalize(Quaternion(w, x, y, z))


def quat_array_to_rotmats(quats: np.ndarray) -> np.ndarray:
    """Vectorized (N, 4) wxyz -> (N, 3, 3)."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform: x_cam = R(rotation) @ x_world + translation."""

    rotation: Quaternion
    translation: np.ndarray

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Quaternion.identity(), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.translation
        return M

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to (3,) or (N, 3) world points, returning camera-frame points."""
        R = self.rotation_matrix()
        p = np.asarray(points, dtype=np.float64)
        return p @ R.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the world frame: -R^T t."""
        R = self.rotation_matrix()
        return -(R.T @ self.translation)


def pose_compose(a: Pose, b: Pose) -> Pose:
    """a after b: (a o b).transform(x) == a.transform(b.transform(x))."""
    _require_unit(a.rotation, "pose rotation")
    _require_unit(b.rotation, "pose rotation")
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    Ra = quat_to_rotmat(a.rotation)
    t = Ra @ b.translation + a.translation
    return Pose(q, t)


def pose_inverse(p: Pose) -> Pose:
    _require_unit(p.rotation, "pose rotation")
    R = p.rotation_matrix()
    return Pose(p.rotation.conjugate(), -(R.T @ p.translation))


def rotation_angle_deg(q: Quaternion) -> float:
    """Rotation angle of a unit quaternion, degrees; sign-robust and stable near 0."""
    vec = math.sqrt(q.x * q.x + q.y * q.y + q.z * q.z)
    return math.degrees(2.0 * math.atan2(vec, abs(q.w)))


def pose_difference_magnitudes(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle deg, camera-center distance m) between two poses."""
    rel = quat_multiply(a.rotation.conjugate(), b.rotation)
    ang = rotation_angle_deg(quat_normalize(rel))
    dist = float(np.linalg.norm(a.camera_center() - b.camera_center()))
    return ang, dist


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters. No distortion model."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")


class PixelProjection(NamedTuple):
    u: float
    v: float
    z: float
    visible: bool


def project_point(x_world, pose: Pose, K: CameraIntrinsics) -> PixelProjection:
    """Pinhole projection of one world point; points at or behind `near` are flagged."""
    xc, yc, zc = pose.transform(np.asarray(x_world, dtype=np.float64))
    if zc <= K.near:
        return PixelProjection(0.0, 0.0, float(zc), False)
    return PixelProjection(
        float(K.fx * xc / zc + K.cx),
        float(K.fy * yc / zc + K.cy),
        float(zc),
        True,
    )
