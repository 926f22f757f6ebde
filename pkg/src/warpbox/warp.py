"""Frame-to-frame box warping across a multi-camera rig.

The transform between a camera at one keyframe and a (possibly different)
camera at another keyframe chains camera -> ego -> global -> ego' -> camera'.
When source and destination are the same physical camera this is the
inner-view case; across cameras it is the outer-view case.

Warping treats the box as rigidly attached to the world, so for moving
objects the warped box is biased by exactly the object's own displacement
over the interval.
"""

from __future__ import annotations

from dataclasses import dataclass

from .boxes import EPS_NEAR, Box2D, Box3D, deduce_box2d
from .errors import BehindCameraError, FrameOutOfRangeError
from .geometry import CAMERA_UP, CameraCalib, Pose, wrap_angle, yaw_delta

#: Minimum in-image area (px^2) for a deduced box to count as visible.
MIN_VISIBLE_AREA = 64.0


@dataclass(frozen=True)
class FrameContext:
    """One keyframe: timestamp, ego pose (ego -> global), and the camera rig."""

    timestamp: float
    ego_pose: Pose
    rig: tuple[CameraCalib, ...]

    def __post_init__(self):
        rig = tuple(self.rig)
        if not rig:
            raise ValueError("rig must contain at least one camera")
        ids = [cam.view_id for cam in rig]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate view ids in rig: {ids}")
        object.__setattr__(self, "rig", rig)

    def camera(self, view_id: str) -> CameraCalib:
        for cam in self.rig:
            if cam.view_id == view_id:
                return cam
        raise KeyError(f"no camera {view_id!r} in rig")


@dataclass(frozen=True)
class WarpedObservation:
    """A box expressed in one destination camera, with its deduced 2D box."""

    view_id: str
    box_cam: Box3D
    box2d: Box2D
    dt_index: int


def homography(
    src_cam: CameraCalib,
    src_frame: FrameContext,
    dst_frame: FrameContext,
    dst_cam: CameraCalib,
) -> Pose:
    """SE(3) transform taking source-camera coordinates to destination-camera coordinates."""
    return (
        dst_cam.extrinsic.inverse()
        .compose(dst_frame.ego_pose.inverse())
        .compose(src_frame.ego_pose)
        .compose(src_cam.extrinsic)
    )


def warp_box(box: Box3D, transform: Pose, tilt_tol: float = 1e-6) -> Box3D:
    """Carry a camera-frame box through a camera-to-camera transform.

    The center moves rigidly, the size is unchanged, and the yaw picks up the
    transform's twist about the camera vertical.  Corner sets are preserved:
    ``corners3d(warp_box(b, H)) == H(corners3d(b))`` point for point.

    Raises:
        WarpTiltError: the transform tilts out of the horizontal plane.
    """
    delta = yaw_delta(transform, CAMERA_UP, tilt_tol)
    return Box3D(transform.apply(box.center), box.size, wrap_angle(box.yaw + delta))


def visible_box2d(
    box_cam: Box3D,
    cam: CameraCalib,
    eps_near: float = EPS_NEAR,
    min_area: float = MIN_VISIBLE_AREA,
) -> Box2D | None:
    """Deduced 2D box when the camera-frame box passes the visibility predicate.

    Visible means all eight corners are in front of the near plane and the
    deduced box overlaps the image rectangle with at least ``min_area`` px^2.
    """
    try:
        box2d = deduce_box2d(box_cam, cam.intrinsics, eps_near)
    except BehindCameraError:
        return None
    if box2d.clipped_area(cam.intrinsics.width, cam.intrinsics.height) < min_area:
        return None
    return box2d


def observe(
    box: Box3D,
    src_cam: CameraCalib,
    trajectory: list[FrameContext],
    frame_index: int,
    dt: int,
    eps_near: float = EPS_NEAR,
    min_area: float = MIN_VISIBLE_AREA,
) -> list[WarpedObservation]:
    """Warp a frame-``frame_index`` box into every visible camera at ``frame_index + dt``.

    Raises:
        FrameOutOfRangeError: ``frame_index + dt`` falls outside the trajectory.
    """
    target = frame_index + dt
    if not (0 <= frame_index < len(trajectory)) or not (0 <= target < len(trajectory)):
        raise FrameOutOfRangeError(
            f"frame {frame_index} + offset {dt} outside trajectory of length {len(trajectory)}"
        )
    src_frame = trajectory[frame_index]
    dst_frame = trajectory[target]

    observations = []
    for dst_cam in dst_frame.rig:
        transform = homography(src_cam, src_frame, dst_frame, dst_cam)
        warped = warp_box(box, transform)
        box2d = visible_box2d(warped, dst_cam, eps_near, min_area)
        if box2d is not None:
            observations.append(WarpedObservation(dst_cam.view_id, warped, box2d, dt))
    return observations
