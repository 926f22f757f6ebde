"""Runtime invariant suite behind the ``check`` CLI subcommand.

A fast, dependency-free subset of the property tests: geometry algebra
against the 4x4 matrix oracle, the projection/GIoU oracles, warp round trips,
stationary-object label consistency, and generation determinism.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .boxes import Box2D, Box3D, corners3d, deduce_box2d, giou2d, yaw_rotation
from .geometry import CAMERA_UP, Pose
from .simworld import SceneConfig, generate_scene, render_labels, scene_to_json
from .warp import homography, warp_box


def _random_pose(rng) -> Pose:
    return Pose(rng.normal(size=4), rng.uniform(-10, 10, size=3))


def check_pose_algebra() -> None:
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b, c = (_random_pose(rng) for _ in range(3))
        assert a.compose(b).compose(c).is_close(a.compose(b.compose(c)), tol=1e-9)
        assert a.compose(a.inverse()).is_close(Pose.identity(), tol=1e-9)
        x = rng.uniform(-10, 10, size=3)
        assert np.allclose(a.compose(b).apply(x), a.apply(b.apply(x)), atol=1e-9)
        assert np.allclose(a.compose(b).matrix, a.matrix @ b.matrix, atol=1e-9)
        assert np.allclose(a.inverse().matrix, np.linalg.inv(a.matrix), atol=1e-9)


def check_projection_oracle() -> None:
    from .geometry import Intrinsics

    k = Intrinsics(800, 800, 800, 450, 1600, 900)
    rng = np.random.default_rng(2)
    for _ in range(20):
        box = Box3D(
            [rng.uniform(-6, 6), rng.uniform(-2, 2), rng.uniform(10, 40)],
            rng.uniform(0.5, 4.0, size=3),
            rng.uniform(-math.pi, math.pi),
        )
        deduced = deduce_box2d(box, k)
        n = 4000
        w, h, l = box.size
        areas = np.array([h * l, h * l, w * l, w * l, w * h, w * h])
        faces = rng.choice(6, size=n, p=areas / areas.sum())
        uvw = rng.uniform(-0.5, 0.5, size=(n, 2))
        pts = np.empty((n, 3))
        half = np.array([w, h, l])
        for i in range(n):
            axis = faces[i] // 2
            others = [j for j in range(3) if j != axis]
            pts[i, axis] = (-0.5 if faces[i] % 2 == 0 else 0.5) * half[axis]
            pts[i, others[0]] = uvw[i, 0] * half[others[0]]
            pts[i, others[1]] = uvw[i, 1] * half[others[1]]
        world = box.center + pts @ yaw_rotation(box.yaw).T
        u = k.fx * world[:, 0] / world[:, 2] + k.cx
        v = k.fy * world[:, 1] / world[:, 2] + k.cy
        assert u.min() >= deduced.x_tl - 1e-9 and u.max() <= deduced.x_br + 1e-9
        assert v.min() >= deduced.y_tl - 1e-9 and v.max() <= deduced.y_br + 1e-9


def check_giou_axioms() -> None:
    a, b = Box2D(0, 0, 2, 2), Box2D(1, 1, 3, 3)
    assert abs(giou2d(a, b) - (-5.0 / 63.0)) < 1e-12
    assert giou2d(a, a) == 1.0
    rng = np.random.default_rng(3)
    for _ in range(200):
        pts = rng.uniform(-20, 20, size=8)
        p = Box2D(min(pts[0], pts[1]), min(pts[2], pts[3]), max(pts[0], pts[1]), max(pts[2], pts[3]))
        q = Box2D(min(pts[4], pts[5]), min(pts[6], pts[7]), max(pts[4], pts[5]), max(pts[6], pts[7]))
        g = giou2d(p, q)
        assert -1.0 < g <= 1.0 + 1e-12
        assert abs(g - giou2d(q, p)) < 1e-12


def check_warp_round_trip() -> None:
    rng = np.random.default_rng(4)
    for _ in range(100):
        box = Box3D(
            [rng.uniform(-5, 5), rng.uniform(-1, 1), rng.uniform(8, 35)],
            rng.uniform(0.5, 3.0, size=3),
            rng.uniform(-math.pi, math.pi),
        )
        transform = Pose.from_axis_angle(
            CAMERA_UP, rng.uniform(-math.pi, math.pi), rng.uniform(-10, 10, size=3)
        )
        warped = warp_box(box, transform)
        assert np.allclose(corners3d(warped), transform.apply(corners3d(box)), atol=1e-9)
        back = warp_box(warped, transform.inverse())
        assert np.allclose(back.center, box.center, atol=1e-9)
        assert abs(back.yaw - box.yaw) < 1e-9


def check_stationary_consistency() -> None:
    scene = generate_scene(SceneConfig(n_objects=10, moving_fraction=0.0, seed=5, n_keyframes=12))
    labels = render_labels(scene)
    checked = 0
    for t_idx in (0, 4, 8):
        if t_idx + 3 >= len(scene.frames):
            continue
        frame_a, frame_b = scene.frames[t_idx], scene.frames[t_idx + 3]
        for view_id, objs in labels.frames[t_idx].items():
            cam = frame_a.camera(view_id)
            for track_id, entry in objs.items():
                target = labels.entry(t_idx + 3, view_id, track_id)
                if target is None:
                    continue
                transform = homography(cam, frame_a, frame_b, frame_b.camera(view_id))
                warped = warp_box(entry.box3d, transform)
                assert np.allclose(warped.center, target.box3d.center, atol=1e-9)
                assert abs(warped.yaw - target.box3d.yaw) < 1e-9
                checked += 1
    assert checked > 5, f"only {checked} stationary pairs checked"


def check_labels_rederivable() -> None:
    scene = generate_scene(SceneConfig(n_objects=8, seed=6, n_keyframes=8))
    labels = render_labels(scene)
    for frame_idx, per_view in enumerate(labels.frames):
        frame = scene.frames[frame_idx]
        for view_id, objs in per_view.items():
            intrinsics = frame.camera(view_id).intrinsics
            for entry in objs.values():
                rederived = deduce_box2d(entry.box3d, intrinsics)
                assert np.allclose(entry.box2d.to_list(), rederived.to_list(), atol=1e-9)


def check_generation_deterministic() -> None:
    cfg = SceneConfig(n_objects=12, seed=7, n_keyframes=10)
    a = json.dumps(scene_to_json(generate_scene(cfg)), sort_keys=True)
    b = json.dumps(scene_to_json(generate_scene(cfg)), sort_keys=True)
    assert a == b


CHECKS = (
    ("pose-algebra", check_pose_algebra),
    ("projection-oracle", check_projection_oracle),
    ("giou-axioms", check_giou_axioms),
    ("warp-round-trip", check_warp_round_trip),
    ("stationary-consistency", check_stationary_consistency),
    ("labels-rederivable", check_labels_rederivable),
    ("generation-deterministic", check_generation_deterministic),
)


def run_checks(out=print) -> int:
    """Run every invariant check; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
        except Exception as exc:  # report and continue
            failures += 1
            out(f"FAIL {name}: {exc}")
        else:
            out(f"PASS {name}")
    return failures
