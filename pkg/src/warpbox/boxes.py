"""7-DoF 3D boxes, corner extraction, perspective projection, and overlap measures.

A ``Box3D`` lives in a camera frame (x right, y down, z forward) unless the
surrounding code says otherwise.  At yaw 0 the box width ``w`` spans camera x,
height ``h`` spans camera y, and length ``l`` (the heading axis) spans camera z.
Yaw rotates the box about the camera vertical (-y) through its center, so the
height axis never tilts.

Corner ordering is the sign bit pattern over half-sizes before rotation:
corner ``i`` carries signs ``(sx, sy, sz)`` with ``sx`` the most significant
bit (0 -> -1, 1 -> +1).  This ordering is frozen; tests rely on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateError
from .geometry import Intrinsics, wrap_angle

#: Default near-plane depth in meters; points closer than this do not project.
EPS_NEAR = 0.1

#: Canonical corner sign pattern, shape (8, 3).
CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)
CORNER_SIGNS.flags.writeable = False


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about the camera vertical (-y) by ``yaw`` radians."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (m), size (w, h, l) (m), yaw about the vertical."""

    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        center = np.array(self.center, dtype=float).reshape(3)
        size = np.array(self.size, dtype=float).reshape(3)
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size)) and math.isfinite(self.yaw)):
            raise ValueError("box parameters must be finite")
        if np.any(size <= 0):
            raise ValueError(f"box sizes must be strictly positive, got {size}")
        center.flags.writeable = False
        size.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def w(self) -> float:
        return float(self.size[0])

    @property
    def h(self) -> float:
        return float(self.size[1])

    @property
    def l(self) -> float:
        return float(self.size[2])

    def to_params(self) -> np.ndarray:
        """Flat parameter vector (x, y, z, w, h, l, yaw)."""
        return np.concatenate([self.center, self.size, [self.yaw]])

    @classmethod
    def from_params(cls, params: np.ndarray) -> "Box3D":
        params = np.asarray(params, dtype=float).reshape(7)
        return cls(params[:3], params[3:6], float(params[6]))


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned pixel box (x_tl, y_tl, x_br, y_br)."""

    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x_tl, self.y_tl, self.x_br, self.y_br)):
            raise ValueError("box coordinates must be finite")
        if self.x_tl > self.x_br or self.y_tl > self.y_br:
            raise ValueError(f"degenerate corner order: {self}")

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))

    def clipped_area(self, width: float, height: float) -> float:
        """Area of the overlap with the image rectangle [0, width] x [0, height]."""
        w = max(0.0, min(self.x_br, width) - max(self.x_tl, 0.0))
        h = max(0.0, min(self.y_br, height) - max(self.y_tl, 0.0))
        return w * h

    def to_list(self) -> list[float]:
        return [self.x_tl, self.y_tl, self.x_br, self.y_br]

    @classmethod
    def from_center_size(cls, cx: float, cy: float, width: float, height: float) -> "Box2D":
        width = max(width, 0.0)
        height = max(height, 0.0)
        return cls(cx - 0.5 * width, cy - 0.5 * height, cx + 0.5 * width, cy + 0.5 * height)


def corners3d(box: Box3D) -> np.ndarray:
    """Eight corners of the box in its own frame, canonical order, shape (8, 3).

    The centroid of the corners equals the box center and rotating the box
    rotates every corner about the vertical axis through the center.
    """
    offsets = CORNER_SIGNS * (0.5 * box.size)
    return box.center + offsets @ yaw_rotation(box.yaw).T


def project_point(intrinsics: Intrinsics, point, eps_near: float = EPS_NEAR) -> np.ndarray:
    """Pinhole projection of one camera-frame point to pixels.

    Raises:
        BehindCameraError: the point depth is below ``eps_near``.
    """
    point = np.asarray(point, dtype=float).reshape(3)
    if point[2] < eps_near:
        raise BehindCameraError(f"point depth {point[2]:.4f} m is below the near plane {eps_near} m")
    return np.array(
        [
            intrinsics.fx * point[0] / point[2] + intrinsics.cx,
            intrinsics.fy * point[1] / point[2] + intrinsics.cy,
        ]
    )


def project_points(intrinsics: Intrinsics, points: np.ndarray, eps_near: float = EPS_NEAR) -> np.ndarray:
    """Vectorized pinhole projection of (N, 3) camera-frame points."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    depths = points[:, 2]
    if np.any(depths < eps_near):
        raise BehindCameraError(
            f"{int(np.sum(depths < eps_near))} of {len(points)} points are behind the near plane"
        )
    uv = np.empty((len(points), 2))
    uv[:, 0] = intrinsics.fx * points[:, 0] / depths + intrinsics.cx
    uv[:, 1] = intrinsics.fy * points[:, 1] / depths + intrinsics.cy
    return uv


def deduce_box2d(box: Box3D, intrinsics: Intrinsics, eps_near: float = EPS_NEAR) -> Box2D:
    """Axis-aligned pixel bounding box of the eight projected corners.

    The result is intentionally not clipped to the image bounds; visibility
    filtering is a separate predicate.

    Raises:
        BehindCameraError: any corner lies behind the near plane.
    """
    uv = project_points(intrinsics, corners3d(box), eps_near)
    return Box2D(float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))


def giou2d(a: Box2D, b: Box2D) -> float:
    """Generalized IoU of two axis-aligned boxes, in (-1, 1].

    ``IoU - (hull - union) / hull`` where hull is the smallest enclosing
    axis-aligned box.  Zero-area boxes are allowed; IoU contributes 0 when the
    union has zero area.

    Raises:
        DegenerateError: both boxes collapse to the same point (zero hull).
    """
    inter_w = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    inter_h = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    intersection = max(inter_w, 0.0) * max(inter_h, 0.0)
    union = a.area + b.area - intersection

    hull_w = max(a.x_br, b.x_br) - min(a.x_tl, b.x_tl)
    hull_h = max(a.y_br, b.y_br) - min(a.y_tl, b.y_tl)
    hull = hull_w * hull_h
    if hull <= 0.0:
        raise DegenerateError("enclosing hull has zero area")

    iou = intersection / union if union > 0.0 else 0.0
    return iou - (hull - union) / hull


def iou3d_aligned(a: Box3D, b: Box3D) -> float:
    """IoU of the two size-boxes after forcing centers and yaws equal."""
    inter = float(np.prod(np.minimum(a.size, b.size)))
    vol_a = float(np.prod(a.size))
    vol_b = float(np.prod(b.size))
    return inter / (vol_a + vol_b - inter)
