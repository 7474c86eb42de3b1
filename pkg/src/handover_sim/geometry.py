"""Camera model, rigid transforms and pixel/3D conversions.

Conventions used everywhere in this package:

- Camera frame follows the OpenCV convention: x right, y down, z forward
  along the optical axis. Depth means the z coordinate of a point in the
  camera frame (not ray length), so the sensor blind spot is a plain
  ``z < min_depth`` comparison.
- Quaternions are stored as (w, x, y, z) and renormalized on construction.
- Invalid depth readings are encoded as 0.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(Exception):
    pass


class OutOfBoundsError(GeometryError):
    """Pixel coordinate outside the image."""


class InvalidDepthError(GeometryError):
    """Depth reading of zero or outside the sensor range."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the sensor's usable depth range."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    min_depth: float = 0.105
    max_depth: float = 4.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not (0 < self.min_depth < self.max_depth):
            raise ValueError("require 0 < min_depth < max_depth")

    def contains_pixel(self, u: float, v: float) -> bool:
        return 0 <= u < self.width and 0 <= v < self.height

    def depth_valid(self, depth: float) -> bool:
        return self.min_depth <= depth <= self.max_depth


def _quat_normalized(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError("quaternion must have 4 components (w, x, y, z)")
    n = math.sqrt(float(q @ q))
    if n < 1e-12:
        raise ValueError("zero quaternion is not a rotation")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    # q * (0, p) * q^-1 for a unit quaternion
    w, x, y, z = q
    qv = np.array([x, y, z])
    t = 2.0 * np.cross(qv, p)
    return p + w * t + np.cross(qv, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_slerp(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc."""
    dot = float(a @ b)
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-12:
        out = a + alpha * (b - a)
        return out / math.sqrt(float(out @ out))
    theta = math.acos(max(-1.0, min(1.0, dot)))
    s = math.sin(theta)
    return (math.sin((1 - alpha) * theta) / s) * a + (math.sin(alpha * theta) / s) * b


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix (Shepperd's method)."""
    t = float(np.trace(m))
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        return _quat_normalized(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    i = int(np.argmax(np.diag(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = math.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2.0
    q = np.zeros(4)
    q[0] = (m[k, j] - m[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (m[j, i] + m[i, j]) / s
    q[1 + k] = (m[k, i] + m[i, k]) / s
    return _quat_normalized(q)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (unit quaternion) followed by translation."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "orientation", _quat_normalized(self.orientation))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def transform(self, p: np.ndarray) -> np.ndarray:
        """Apply the transform to a point: R @ p + t."""
        return quat_rotate(self.orientation, np.asarray(p, dtype=float)) + self.position

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """Apply only the rotation part (for directions)."""
        return quat_rotate(self.orientation, np.asarray(v, dtype=float))

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.orientation)
        return Pose(position=-quat_rotate(qc, self.position), orientation=qc)

    def compose(self, other: "Pose") -> "Pose":
        """self * other: apply ``other`` first, then ``self``."""
        return Pose(
            position=self.transform(other.position),
            orientation=quat_multiply(self.orientation, other.orientation),
        )

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)


def transform_point(pose: Pose, p) -> np.ndarray:
    """Rigid transform of a point into the pose's target frame."""
    return pose.transform(p)


@dataclass
class DepthImage:
    """Per-pixel metric depth, row-major, 0.0 marking invalid pixels."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).reshape(self.height, self.width)

    @staticmethod
    def full(width: int, height: int, value: float = 0.0) -> "DepthImage":
        return DepthImage(width, height, np.full((height, width), value, dtype=float))

    def copy(self) -> "DepthImage":
        return DepthImage(self.width, self.height, self.data.copy())

    def valid_mask(self) -> np.ndarray:
        return self.data > 0.0


def deproject(pixel, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    """Back-project a pixel with known depth to a camera-frame point."""
    u, v = pixel
    if not intr.contains_pixel(u, v):
        raise OutOfBoundsError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    if depth <= 0.0 or not intr.depth_valid(depth):
        raise InvalidDepthError(f"depth {depth} outside [{intr.min_depth}, {intr.max_depth}]")
    return np.array(
        [(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth]
    )


def project(point, intr: CameraIntrinsics) -> tuple[float, float, float]:
    """Project a camera-frame point to (u, v, depth)."""
    p = np.asarray(point, dtype=float)
    if p[2] <= 0.0:
        raise InvalidDepthError("point is at or behind the camera plane")
    u = intr.fx * p[0] / p[2] + intr.cx
    v = intr.fy * p[1] / p[2] + intr.cy
    return u, v, p[2]


def perpendicular_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal basis (e1, e2) of the plane normal to ``axis``.

    Shared by grasp selection and outcome scoring so that a yaw angle has one
    meaning everywhere: direction(yaw) = cos(yaw) * e1 + sin(yaw) * e2.
    """
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    ref = np.array([1.0, 0.0, 0.0]) if abs(a[0]) <= 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ a) * a
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return e1, e2


def yaw_of_direction(direction: np.ndarray, axis: np.ndarray) -> float:
    """Yaw in [0, pi) of an in-plane direction about ``axis``.

    Antipodal directions are equivalent for a two-finger closing axis, hence
    the half-turn range.
    """
    e1, e2 = perpendicular_frame(axis)
    d = np.asarray(direction, dtype=float)
    yaw = math.atan2(float(d @ e2), float(d @ e1))
    return yaw % math.pi


def direction_of_yaw(yaw: float, axis: np.ndarray) -> np.ndarray:
    e1, e2 = perpendicular_frame(axis)
    return math.cos(yaw) * e1 + math.sin(yaw) * e2


def yaw_error(target: float, current: float) -> float:
    """Signed smallest yaw difference on the half-turn circle, in (-pi/2, pi/2]."""
    d = (target - current) % math.pi
    if d > math.pi / 2:
        d -= math.pi
    return d
