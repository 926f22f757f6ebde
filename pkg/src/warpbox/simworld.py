"""Synthetic multi-camera driving scenes with exact temporal 2D labels.

A scene is an ego trajectory sampled at keyframe rate, a fixed six-camera
rig, and a set of constant-velocity object tracks in the global frame.
Rendering produces, per keyframe and camera, the camera-frame 3D box and its
deduced 2D box for every track that passes the visibility predicate.  The
2D boxes are exact projections; pseudo-label noise is emulated separately by
uniform jitter.

The global frame is x forward, y left, z up with the ground plane at z = 0.
Mount yaws are measured about global z from the ego forward axis.  Random
sampling follows a fixed order per object, so a (config, seed) pair always
produces a bit-identical scene.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .boxes import Box2D, Box3D
from .errors import ConfigError, SchemaError
from .geometry import CameraCalib, Intrinsics, Pose, quat_from_axis_angle, quat_multiply, wrap_angle
from .warp import FrameContext, visible_box2d

SCENE_SCHEMA_VERSION = 1
LABELS_SCHEMA_VERSION = 1

_UNITS = {"length": "meters", "angle": "radians", "time": "seconds", "pixel": "pixels"}

#: (w, h, l) sampling ranges per pseudo-class, meters.
CLASS_SIZE_RANGES = {
    "ped": ((0.5, 0.8), (1.5, 1.9), (0.5, 0.8)),
    "car": ((1.7, 2.1), (1.4, 1.8), (4.0, 5.0)),
    "bus": ((2.7, 3.1), (3.0, 3.4), (10.0, 12.0)),
}

# Camera base orientation: optical axis along ego forward, image x to the
# ego's right, image y down.  Equals Rz(-90deg) @ Rx(-90deg).
_CAM_BASE_QUAT = quat_multiply(
    quat_from_axis_angle((0.0, 0.0, 1.0), -0.5 * math.pi),
    quat_from_axis_angle((1.0, 0.0, 0.0), -0.5 * math.pi),
)


@dataclass(frozen=True)
class SceneConfig:
    keyframe_rate: float = 2.0
    n_keyframes: int = 40
    n_objects: int = 24
    moving_fraction: float = 0.26
    speed_range: tuple[float, float] = (2.0, 8.0)
    spawn_distance: tuple[float, float] = (8.0, 45.0)
    ego_speed: float = 8.0
    trajectory_kind: str = "straight"
    curvature: float = 0.02
    camera_yaws_deg: tuple[float, ...] = (0.0, 55.0, -55.0, 110.0, -110.0, 180.0)
    image_width: int = 1600
    image_height: int = 900
    focal: float = 800.0
    camera_height: float = 1.6
    camera_radius: float = 1.0
    class_weights: tuple[tuple[str, float], ...] = (("car", 0.6), ("ped", 0.3), ("bus", 0.1))
    eps_near: float = 0.1
    min_box2d_area: float = 64.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))
        object.__setattr__(self, "spawn_distance", tuple(float(v) for v in self.spawn_distance))
        object.__setattr__(self, "camera_yaws_deg", tuple(float(v) for v in self.camera_yaws_deg))
        object.__setattr__(
            self, "class_weights", tuple((str(n), float(w)) for n, w in self.class_weights)
        )
        if self.keyframe_rate <= 0:
            raise ConfigError("keyframe_rate must be positive")
        if self.n_keyframes < 2:
            raise ConfigError("n_keyframes must be at least 2")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be non-negative")
        if not 0.0 <= self.moving_fraction <= 1.0:
            raise ConfigError("moving_fraction must lie in [0, 1]")
        if not 0.0 <= self.speed_range[0] <= self.speed_range[1]:
            raise ConfigError(f"invalid speed_range {self.speed_range}")
        if not 0.0 < self.spawn_distance[0] <= self.spawn_distance[1]:
            raise ConfigError(f"invalid spawn_distance {self.spawn_distance}")
        if self.trajectory_kind not in ("straight", "arc"):
            raise ConfigError(f"unknown trajectory kind {self.trajectory_kind!r}")
        if self.focal <= 0 or self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError("camera intrinsics must be positive")
        if len(set(self.camera_yaws_deg)) != len(self.camera_yaws_deg):
            raise ConfigError("camera yaws must be distinct")
        for name, weight in self.class_weights:
            if name not in CLASS_SIZE_RANGES:
                raise ConfigError(f"unknown pseudo-class {name!r}")
            if weight <= 0:
                raise ConfigError("class weights must be positive")


@dataclass(frozen=True)
class ObjectTrack:
    """Constant-velocity track: position(t) = position0 + velocity * t."""

    track_id: int
    pseudo_class: str
    size: np.ndarray
    position0: np.ndarray
    velocity: np.ndarray
    yaw: float

    def __post_init__(self):
        for name in ("size", "position0", "velocity"):
            arr = np.array(getattr(self, name), dtype=float).reshape(3)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def is_moving(self) -> bool:
        return bool(np.linalg.norm(self.velocity) > 0)

    def center_at(self, t: float) -> np.ndarray:
        return self.position0 + self.velocity * t


@dataclass(frozen=True)
class Scene:
    config: SceneConfig
    frames: tuple[FrameContext, ...]
    tracks: tuple[ObjectTrack, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        times = [f.timestamp for f in frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("frame timestamps must be strictly increasing")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "tracks", tuple(self.tracks))

    @property
    def timestamps(self) -> tuple[float, ...]:
        return tuple(f.timestamp for f in self.frames)

    def track(self, track_id: int) -> ObjectTrack:
        for tr in self.tracks:
            if tr.track_id == track_id:
                return tr
        raise KeyError(f"no track {track_id}")


@dataclass(frozen=True)
class BoxLabel:
    box3d: Box3D
    box2d: Box2D


@dataclass(frozen=True)
class SceneLabels:
    """Per keyframe, per camera, per visible track: (camera-frame Box3D, Box2D)."""

    timestamps: tuple[float, ...]
    frames: tuple[dict, ...]  # frame index -> {view_id: {track_id: BoxLabel}}

    def entry(self, frame_index: int, view_id: str, track_id: int) -> BoxLabel | None:
        return self.frames[frame_index].get(view_id, {}).get(track_id)

    def views_of(self, track_id: int, frame_index: int) -> list[str]:
        return sorted(
            view for view, objs in self.frames[frame_index].items() if track_id in objs
        )

    def n_boxes(self) -> int:
        return sum(len(objs) for frame in self.frames for objs in frame.values())


def camera_view_id(yaw_deg: float) -> str:
    return f"cam_{int(round(yaw_deg)) % 360:03d}"


def build_rig(config: SceneConfig) -> tuple[CameraCalib, ...]:
    intrinsics = Intrinsics(
        fx=config.focal,
        fy=config.focal,
        cx=config.image_width / 2.0,
        cy=config.image_height / 2.0,
        width=config.image_width,
        height=config.image_height,
    )
    rig = []
    for yaw_deg in config.camera_yaws_deg:
        yaw = math.radians(yaw_deg)
        rotation = quat_multiply(quat_from_axis_angle((0.0, 0.0, 1.0), yaw), _CAM_BASE_QUAT)
        translation = (
            config.camera_radius * math.cos(yaw),
            config.camera_radius * math.sin(yaw),
            config.camera_height,
        )
        rig.append(CameraCalib(Pose(rotation, translation), intrinsics, camera_view_id(yaw_deg)))
    return tuple(rig)


def ego_pose_at(config: SceneConfig, t: float) -> Pose:
    """Ego -> global pose along the configured trajectory."""
    s = config.ego_speed * t
    if config.trajectory_kind == "straight" or config.curvature == 0.0:
        return Pose(translation=(s, 0.0, 0.0))
    heading = config.curvature * s
    radius = 1.0 / config.curvature
    position = (radius * math.sin(heading), radius * (1.0 - math.cos(heading)), 0.0)
    return Pose(quat_from_axis_angle((0.0, 0.0, 1.0), heading), position)


def generate_scene(config: SceneConfig) -> Scene:
    """Sample a scene deterministically from its config (including its seed).

    Exactly ``round(moving_fraction * n_objects)`` tracks are movers; movers
    head along their velocity, static objects get a uniform yaw.
    """
    rng = np.random.default_rng(config.seed)
    rig = build_rig(config)
    frames = tuple(
        FrameContext(k / config.keyframe_rate, ego_pose_at(config, k / config.keyframe_rate), rig)
        for k in range(config.n_keyframes)
    )

    class_names = [name for name, _ in config.class_weights]
    weights = np.array([w for _, w in config.class_weights])
    weights = weights / weights.sum()

    drafts = []
    for track_id in range(config.n_objects):
        cls = class_names[int(rng.choice(len(class_names), p=weights))]
        size = np.array([rng.uniform(lo, hi) for lo, hi in CLASS_SIZE_RANGES[cls]])
        anchor = int(rng.integers(0, config.n_keyframes))
        distance = rng.uniform(*config.spawn_distance)
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        speed = rng.uniform(*config.speed_range)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        static_yaw = rng.uniform(-math.pi, math.pi)
        drafts.append((cls, size, anchor, distance, azimuth, speed, heading, static_yaw))

    n_movers = int(round(config.moving_fraction * config.n_objects))
    mover_ids = set(rng.permutation(config.n_objects)[:n_movers].tolist())

    tracks = []
    for track_id, (cls, size, anchor, distance, azimuth, speed, heading, static_yaw) in enumerate(drafts):
        t_anchor = frames[anchor].timestamp
        ego_xy = frames[anchor].ego_pose.translation[:2]
        center = np.array(
            [
                ego_xy[0] + distance * math.cos(azimuth),
                ego_xy[1] + distance * math.sin(azimuth),
                0.5 * size[1],
            ]
        )
        if track_id in mover_ids:
            velocity = speed * np.array([math.cos(heading), math.sin(heading), 0.0])
            yaw = heading
        else:
            velocity = np.zeros(3)
            yaw = static_yaw
        tracks.append(
            ObjectTrack(track_id, cls, size, center - velocity * t_anchor, velocity, yaw)
        )
    return Scene(config, frames, tuple(tracks))


def track_camera_box(track: ObjectTrack, t: float, world_to_cam: Pose) -> Box3D:
    """Track's box expressed in a camera frame at time ``t``.

    The camera-frame yaw comes from transporting the heading direction, which
    is exact for the yaw-aligned rigs built here.
    """
    center = world_to_cam.apply(track.center_at(t))
    heading = np.array([math.cos(track.yaw), math.sin(track.yaw), 0.0])
    d = world_to_cam.rotation_matrix @ heading
    return Box3D(center, track.size, math.atan2(-d[0], d[2]))


def render_labels(scene: Scene) -> SceneLabels:
    """Exact per-frame, per-camera labels for every visible track."""
    cfg = scene.config
    frames_out = []
    for frame in scene.frames:
        per_view: dict = {}
        for cam in frame.rig:
            world_to_cam = cam.extrinsic.inverse().compose(frame.ego_pose.inverse())
            entries = {}
            for track in scene.tracks:
                box_cam = track_camera_box(track, frame.timestamp, world_to_cam)
                box2d = visible_box2d(box_cam, cam, cfg.eps_near, cfg.min_box2d_area)
                if box2d is not None:
                    entries[track.track_id] = BoxLabel(box_cam, box2d)
            if entries:
                per_view[cam.view_id] = entries
        frames_out.append(per_view)
    return SceneLabels(scene.timestamps, tuple(frames_out))


def jitter_labels(labels: SceneLabels, scale: float, seed: int = 0) -> SceneLabels:
    """Perturb every 2D box's center and size by uniform noise in [-scale, +scale].

    Noise is measured in units of the box's own width and height; 3D boxes are
    untouched.  Deterministic given the seed.
    """
    if scale < 0:
        raise ValueError("jitter scale must be non-negative")
    rng = np.random.default_rng(seed)
    frames_out = []
    for per_view in labels.frames:
        new_view: dict = {}
        for view_id in sorted(per_view):
            entries = {}
            for track_id in sorted(per_view[view_id]):
                entry = per_view[view_id][track_id]
                b = entry.box2d
                du, dv, dw, dh = rng.uniform(-scale, scale, size=4)
                # Edge-based update keeps scale 0 an exact identity.
                shift_x, grow_x = du * b.width, 0.5 * dw * b.width
                shift_y, grow_y = dv * b.height, 0.5 * dh * b.height
                x_tl, x_br = b.x_tl + shift_x - grow_x, b.x_br + shift_x + grow_x
                y_tl, y_br = b.y_tl + shift_y - grow_y, b.y_br + shift_y + grow_y
                if x_tl > x_br:
                    x_tl = x_br = 0.5 * (x_tl + x_br)
                if y_tl > y_br:
                    y_tl = y_br = 0.5 * (y_tl + y_br)
                entries[track_id] = BoxLabel(entry.box3d, Box2D(x_tl, y_tl, x_br, y_br))
            new_view[view_id] = entries
        frames_out.append(new_view)
    return SceneLabels(labels.timestamps, tuple(frames_out))


# ---------------------------------------------------------------------------
# Serialization


def _pose_to_json(pose: Pose) -> dict:
    return {"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist()}


def _pose_from_json(obj: dict, where: str) -> Pose:
    try:
        return Pose(np.array(obj["rotation"]), np.array(obj["translation"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad pose in {where}: {exc}") from exc


def scene_to_json(scene: Scene) -> dict:
    cfg = asdict(scene.config)
    cfg["class_weights"] = [[n, w] for n, w in scene.config.class_weights]
    return {
        "version": SCENE_SCHEMA_VERSION,
        "kind": "scene",
        "units": dict(_UNITS),
        "config": cfg,
        "ego_poses": [
            {"t": f.timestamp, **_pose_to_json(f.ego_pose)} for f in scene.frames
        ],
        "rig": [
            {
                "view_id": cam.view_id,
                **_pose_to_json(cam.extrinsic),
                "intrinsics": asdict(cam.intrinsics),
            }
            for cam in scene.frames[0].rig
        ],
        "tracks": [
            {
                "track_id": tr.track_id,
                "pseudo_class": tr.pseudo_class,
                "size": tr.size.tolist(),
                "position0": tr.position0.tolist(),
                "velocity": tr.velocity.tolist(),
                "yaw": tr.yaw,
            }
            for tr in scene.tracks
        ],
    }


def scene_from_json(doc: dict) -> Scene:
    if not isinstance(doc, dict) or doc.get("kind") != "scene":
        raise SchemaError("not a scene document")
    if doc.get("version") != SCENE_SCHEMA_VERSION:
        raise SchemaError(f"unsupported scene schema version {doc.get('version')!r}")
    try:
        cfg_doc = dict(doc["config"])
        cfg_doc["class_weights"] = tuple((n, w) for n, w in cfg_doc["class_weights"])
        for key in ("speed_range", "spawn_distance", "camera_yaws_deg"):
            cfg_doc[key] = tuple(cfg_doc[key])
        config = SceneConfig(**cfg_doc)
    except (KeyError, TypeError, ConfigError) as exc:
        raise SchemaError(f"bad scene config: {exc}") from exc

    try:
        rig = tuple(
            CameraCalib(
                _pose_from_json(cam, f"rig[{i}]"),
                Intrinsics(**cam["intrinsics"]),
                cam["view_id"],
            )
            for i, cam in enumerate(doc["rig"])
        )
        frames = tuple(
            FrameContext(ep["t"], _pose_from_json(ep, f"ego_poses[{i}]"), rig)
            for i, ep in enumerate(doc["ego_poses"])
        )
        tracks = tuple(
            ObjectTrack(
                tr["track_id"],
                tr["pseudo_class"],
                np.array(tr["size"]),
                np.array(tr["position0"]),
                np.array(tr["velocity"]),
                tr["yaw"],
            )
            for tr in doc["tracks"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad scene document: {exc}") from exc
    return Scene(config, frames, tracks)


def labels_to_json(labels: SceneLabels) -> dict:
    frames = []
    for idx, per_view in enumerate(labels.frames):
        views = []
        for view_id in sorted(per_view):
            objects = [
                {
                    "track_id": track_id,
                    "box3d": per_view[view_id][track_id].box3d.to_params().tolist(),
                    "box2d": per_view[view_id][track_id].box2d.to_list(),
                }
                for track_id in sorted(per_view[view_id])
            ]
            views.append({"view_id": view_id, "objects": objects})
        frames.append({"t": labels.timestamps[idx], "views": views})
    return {
        "version": LABELS_SCHEMA_VERSION,
        "kind": "labels",
        "units": dict(_UNITS),
        "frames": frames,
    }


def labels_from_json(doc: dict) -> SceneLabels:
    if not isinstance(doc, dict) or doc.get("kind") != "labels":
        raise SchemaError("not a labels document")
    if doc.get("version") != LABELS_SCHEMA_VERSION:
        raise SchemaError(f"unsupported labels schema version {doc.get('version')!r}")
    try:
        timestamps = []
        frames = []
        for frame in doc["frames"]:
            timestamps.append(float(frame["t"]))
            per_view: dict = {}
            for view in frame["views"]:
                entries = {}
                for obj in view["objects"]:
                    entries[int(obj["track_id"])] = BoxLabel(
                        Box3D.from_params(np.array(obj["box3d"])),
                        Box2D(*obj["box2d"]),
                    )
                per_view[view["view_id"]] = entries
            frames.append(per_view)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad labels document: {exc}") from exc
    return SceneLabels(tuple(timestamps), tuple(frames))


def _dump_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def save_scene(scene: Scene, path) -> None:
    _dump_json(scene_to_json(scene), path)


def load_scene(path) -> Scene:
    return scene_from_json(_load_json(path))


def save_labels(labels: SceneLabels, path) -> None:
    _dump_json(labels_to_json(labels), path)


def load_labels(path) -> SceneLabels:
    return labels_from_json(_load_json(path))
