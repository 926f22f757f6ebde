"""SE(3) pose algebra and pinhole camera intrinsics.

Coordinate conventions used throughout the package:

Camera frame (standard computer vision, right-handed):
  - x: right in the image
  - y: down in the image
  - z: forward along the optical axis
  - vertical ("up") axis: -y

Ego / global frame (vehicle convention, right-handed):
  - x: forward
  - y: left
  - z: up
  - vertical axis: +z

A ``Pose`` maps points from its source frame into its destination frame:
``p_dst = R @ p_src + t``.  Camera extrinsics map camera coordinates to ego
coordinates; ego poses map ego coordinates to global coordinates.

Rotations are stored as unit quaternions in scalar-first order ``[w, x, y, z]``,
normalized and canonicalized to a non-negative scalar part on construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import WarpTiltError

# Vertical ("up") direction of each frame family.
CAMERA_UP = (0.0, -1.0, 0.0)
WORLD_UP = (0.0, 0.0, 1.0)

_QUAT_NORM_TOL = 1e-9


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    wrapped = np.asarray(angle) % (2.0 * math.pi)
    wrapped = np.where(wrapped > math.pi, wrapped - 2.0 * math.pi, wrapped)
    if np.ndim(angle) == 0:
        return float(wrapped)
    return wrapped


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two scalar-first quaternions."""
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


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit scalar-first quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    norm = float(np.linalg.norm(axis))
    if norm == 0.0:
        raise ValueError("rotation axis must be non-zero")
    half = 0.5 * angle
    return np.concatenate(([math.cos(half)], math.sin(half) / norm * axis))


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("pose components must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (scalar-first) plus translation in meters."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.array(self.rotation, dtype=float).reshape(4)
        norm = float(np.linalg.norm(q))
        if norm < 1e-12:
            raise ValueError("quaternion norm too small to normalize")
        q = q / norm
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "rotation", _frozen_array(q, (4,)))
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(quat_from_axis_angle(axis, angle), np.asarray(translation, dtype=float))

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix equivalent of this pose."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        """Pose equal to applying ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = quat_to_matrix(self.rotation) @ other.translation + self.translation
        return Pose(q, t)

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.rotation)
        t_inv = -(quat_to_matrix(q_inv) @ self.translation)
        return Pose(q_inv, t_inv)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        rotated = points @ quat_to_matrix(self.rotation).T
        return rotated + self.translation

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
        )


def yaw_delta(pose: Pose, up=CAMERA_UP, tilt_tol: float = 1e-6) -> float:
    """Signed angle in (-pi, pi] by which a yaw angle changes under ``pose``.

    The pose's rotation must be a rotation about the frame's vertical axis
    ``up`` to within ``tilt_tol`` radians of out-of-plane ("swing") motion.

    Raises:
        WarpTiltError: the out-of-plane component exceeds ``tilt_tol``.
    """
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)

    rotated_up = quat_to_matrix(pose.rotation) @ up
    tilt = math.atan2(float(np.linalg.norm(np.cross(rotated_up, up))), float(rotated_up @ up))
    if tilt > tilt_tol:
        raise WarpTiltError(f"rotation tilts the vertical axis by {tilt:.3e} rad (tolerance {tilt_tol:.1e})")

    # Twist component of the swing-twist decomposition about `up`.
    w = float(pose.rotation[0])
    v_parallel = float(pose.rotation[1:] @ up)
    return wrap_angle(2.0 * math.atan2(v_parallel, w))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: focal lengths, principal point, image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


@dataclass(frozen=True)
class CameraCalib:
    """One rig slot: extrinsic (camera -> ego), intrinsics, and camera name."""

    extrinsic: Pose
    intrinsics: Intrinsics
    view_id: str
