"""Multi-camera 7-DoF box warping, temporal 2D supervision, and box recovery."""

from .boxes import Box2D, Box3D, corners3d, deduce_box2d, giou2d, iou3d_aligned, project_point
from .errors import (
    BehindCameraError,
    ConfigError,
    DegenerateError,
    DivergenceError,
    FrameOutOfRangeError,
    NoObservationError,
    NonFiniteError,
    SchemaError,
    WarpTiltError,
    WarpboxError,
)
from .geometry import CAMERA_UP, WORLD_UP, CameraCalib, Intrinsics, Pose, wrap_angle, yaw_delta
from .recovery import (
    RecoveryConfig,
    RecoveryResult,
    ambiguity_probe,
    depth_ray_direction,
    eval_metrics,
    init_guess,
    recover_box,
)
from .simworld import (
    ObjectTrack,
    Scene,
    SceneConfig,
    SceneLabels,
    generate_scene,
    jitter_labels,
    load_labels,
    load_scene,
    render_labels,
    save_labels,
    save_scene,
)
from .supervision import (
    LabeledObject,
    SupervisionSpec,
    TemporalBoxLoss,
    centerness_target,
    grad_fd,
    loss_hybrid,
    loss_loc2d,
    loss_loc3d,
)
from .warp import FrameContext, WarpedObservation, homography, observe, warp_box

__version__ = "0.1.0"
