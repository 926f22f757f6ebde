"""Supervision losses over warped boxes and a finite-difference gradient probe.

The temporal 2D loss warps a predicted camera-frame box to every labeled
(offset, view) pair, deduces the axis-aligned 2D box in that view, and scores
it against the label with ``1 - GIoU`` (0 is a perfect match).  Terms where
the warped prediction falls behind the near plane drop out; the remaining
terms are averaged so loss magnitudes stay comparable across interval
configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .boxes import CORNER_SIGNS, EPS_NEAR, Box2D, Box3D
from .errors import FrameOutOfRangeError, NonFiniteError, NoObservationError
from .geometry import CAMERA_UP, wrap_angle, yaw_delta
from .warp import FrameContext, homography

_UNIT_WEIGHTS = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SupervisionSpec:
    """Temporal offsets and loss weights.

    ``beta_loc2d`` and ``beta_ct`` are carried for config completeness; they
    weight the classification/center-ness terms of a dense detector head,
    which has no counterpart here.
    """

    offsets: tuple[int, ...] = (-3, 0, 3)
    lambda_3d: float = 1.0
    lambda_2d: float = 1.0
    beta_loc2d: float = 1.0
    beta_ct: float = 1.0
    smooth_l1_beta: float = 1.0
    param_weights: tuple[float, ...] = _UNIT_WEIGHTS

    def __post_init__(self):
        offsets = tuple(int(d) for d in self.offsets)
        if not offsets:
            raise ValueError("offsets must be non-empty")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")
        if len(self.param_weights) != 7:
            raise ValueError("param_weights must have 7 entries")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "param_weights", tuple(float(w) for w in self.param_weights))

    @property
    def is_symmetric(self) -> bool:
        """True iff the offset set is closed under negation."""
        return all(-d in self.offsets for d in self.offsets)


@dataclass(frozen=True)
class LabeledObject:
    """Per-offset, per-view 2D labels for one track, anchored at a reference frame.

    ``box3d`` is the 3D supervision target; its presence routes the object to
    the 3D branch of the hybrid loss.
    """

    track_id: int
    frame_index: int
    view_id: str
    labels2d: Mapping[int, Mapping[str, Box2D]]
    box3d: Box3D | None = None

    def __post_init__(self):
        has_2d = any(views for views in self.labels2d.values())
        if not has_2d and self.box3d is None:
            raise ValueError(f"track {self.track_id}: needs at least one 2D label or a 3D label")

    def label_at(self, dt: int, view_id: str | None = None) -> Box2D | None:
        views = self.labels2d.get(dt, {})
        if view_id is not None:
            return views.get(view_id)
        return next(iter(views.values()), None)


def _giou_stack(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Vectorized GIoU over broadcastable (..., 4) box stacks."""
    inter_w = np.minimum(pred[..., 2], label[..., 2]) - np.maximum(pred[..., 0], label[..., 0])
    inter_h = np.minimum(pred[..., 3], label[..., 3]) - np.maximum(pred[..., 1], label[..., 1])
    inter = np.maximum(inter_w, 0.0) * np.maximum(inter_h, 0.0)
    area_p = (pred[..., 2] - pred[..., 0]) * (pred[..., 3] - pred[..., 1])
    area_l = (label[..., 2] - label[..., 0]) * (label[..., 3] - label[..., 1])
    union = area_p + area_l - inter
    hull_w = np.maximum(pred[..., 2], label[..., 2]) - np.minimum(pred[..., 0], label[..., 0])
    hull_h = np.maximum(pred[..., 3], label[..., 3]) - np.minimum(pred[..., 1], label[..., 1])
    hull = hull_w * hull_h
    iou = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return iou - (hull - union) / hull


class TemporalBoxLoss:
    """Precompiled temporal 2D loss for one labeled object.

    Each (offset, view) label pins down a fixed camera-to-camera transform, so
    the transforms and intrinsics are resolved once; evaluating the loss at a
    candidate parameter vector is then a handful of small array operations.
    Corner transport through the precompiled transform matches
    ``deduce_box2d(warp_box(box, H))`` because every transform is checked to
    be twist-only about the camera vertical at build time.

    ``value`` returns ``inf`` for parameter vectors with non-positive sizes or
    with no term in front of the camera, which line searches treat as a
    rejected step.
    """

    def __init__(
        self,
        labels: LabeledObject,
        trajectory: Sequence[FrameContext],
        spec: SupervisionSpec,
        eps_near: float = EPS_NEAR,
    ):
        if not (0 <= labels.frame_index < len(trajectory)):
            raise FrameOutOfRangeError(
                f"reference frame {labels.frame_index} outside trajectory of length {len(trajectory)}"
            )
        src_frame = trajectory[labels.frame_index]
        src_cam = src_frame.camera(labels.view_id)
        self.eps_near = eps_near
        rot_t, trans, focal, principal, label_rows = [], [], [], [], []
        for dt in spec.offsets:
            target = labels.frame_index + dt
            if not (0 <= target < len(trajectory)):
                raise FrameOutOfRangeError(
                    f"offset {dt} from frame {labels.frame_index} outside trajectory"
                )
            dst_frame = trajectory[target]
            for view_id, label in sorted(labels.labels2d.get(dt, {}).items()):
                dst_cam = dst_frame.camera(view_id)
                transform = homography(src_cam, src_frame, dst_frame, dst_cam)
                yaw_delta(transform, CAMERA_UP)  # raises WarpTiltError on tilted rigs
                k = dst_cam.intrinsics
                rot_t.append(transform.rotation_matrix.T)
                trans.append(transform.translation)
                focal.append((k.fx, k.fy))
                principal.append((k.cx, k.cy))
                label_rows.append((label.x_tl, label.y_tl, label.x_br, label.y_br))
        n = len(rot_t)
        self._rot_t = np.array(rot_t).reshape(n, 3, 3)
        self._trans = np.array(trans).reshape(n, 1, 3)
        self._focal = np.array(focal).reshape(n, 2)
        self._principal = np.array(principal).reshape(n, 2)
        self._labels = np.array(label_rows).reshape(n, 4)

    @property
    def term_count(self) -> int:
        return len(self._labels)

    def value_batch(self, params: np.ndarray) -> np.ndarray:
        """Losses of a (B, 7) parameter batch; ``inf`` rows where no term contributes."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        n_batch = len(params)
        out = np.full(n_batch, math.inf)
        if self.term_count == 0:
            return out
        usable = np.all(np.isfinite(params), axis=1) & np.all(params[:, 3:6] > 0.0, axis=1)
        if not usable.any():
            return out
        p = params[usable]

        cos, sin = np.cos(p[:, 6]), np.sin(p[:, 6])
        rot = np.zeros((len(p), 3, 3))
        rot[:, 0, 0] = cos
        rot[:, 0, 2] = -sin
        rot[:, 1, 1] = 1.0
        rot[:, 2, 0] = sin
        rot[:, 2, 2] = cos
        offsets = CORNER_SIGNS[None, :, :] * (0.5 * p[:, None, 3:6])
        corners = p[:, None, :3] + np.einsum("bkj,bij->bki", offsets, rot)

        # (terms, batch, corner, xyz)
        warped = np.einsum("bkj,tji->btki", corners, self._rot_t).transpose(1, 0, 2, 3)
        warped += self._trans[:, None, :, :]
        depths = warped[..., 2]
        valid = depths.min(axis=2) >= self.eps_near  # (terms, batch)
        counts = valid.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = self._focal[:, None, None, :] * warped[..., :2] / depths[..., None]
        uv += self._principal[:, None, None, :]
        pred = np.concatenate([uv.min(axis=2), uv.max(axis=2)], axis=2)  # (terms, batch, 4)
        giou = _giou_stack(pred, self._labels[:, None, :])
        term_losses = np.where(valid, 1.0 - giou, 0.0)
        losses = np.where(counts > 0, term_losses.sum(axis=0) / np.maximum(counts, 1), math.inf)
        out[usable] = losses
        return out

    def value(self, params: np.ndarray) -> float:
        """Mean ``1 - GIoU`` over contributing terms; ``inf`` if none contribute."""
        return float(self.value_batch(np.asarray(params, dtype=float)[None, :])[0])

    def __call__(self, box: Box3D) -> float:
        return self.value(box.to_params())


def loss_loc2d(
    pred: Box3D,
    labels: LabeledObject,
    trajectory: Sequence[FrameContext],
    spec: SupervisionSpec,
    eps_near: float = EPS_NEAR,
) -> float:
    """Temporal 2D localization loss of a prediction against an object's labels.

    Raises:
        FrameOutOfRangeError: an offset in ``spec`` leaves the trajectory.
        NoObservationError: no (offset, view) pair yields a usable term.
    """
    value = TemporalBoxLoss(labels, trajectory, spec, eps_near).value(pred.to_params())
    if not math.isfinite(value):
        raise NoObservationError(
            f"track {labels.track_id}: no valid (offset, view) supervision term"
        )
    return value


def smooth_l1(x: float, beta: float) -> float:
    ax = abs(x)
    if ax < beta:
        return 0.5 * x * x / beta
    return ax - 0.5 * beta


def loss_loc3d(pred: Box3D, gt: Box3D, spec: SupervisionSpec) -> float:
    """Weighted smooth-L1 over the 7 box parameter residuals (yaw wrapped)."""
    residuals = pred.to_params() - gt.to_params()
    residuals[6] = wrap_angle(residuals[6])
    return float(
        sum(
            w * smooth_l1(float(r), spec.smooth_l1_beta)
            for w, r in zip(spec.param_weights, residuals)
        )
    )


def loss_hybrid(
    objects: Sequence[tuple[Box3D, LabeledObject]],
    trajectory: Sequence[FrameContext],
    spec: SupervisionSpec,
    eps_near: float = EPS_NEAR,
) -> float:
    """Weighted sum of the mean 3D-branch and mean 2D-branch losses.

    Objects carrying a ground-truth ``box3d`` go to the 3D branch; all others
    go to the temporal 2D branch.  An empty branch contributes zero.
    """
    losses_3d = []
    losses_2d = []
    for pred, labels in objects:
        if labels.box3d is not None:
            losses_3d.append(loss_loc3d(pred, labels.box3d, spec))
        else:
            losses_2d.append(loss_loc2d(pred, labels, trajectory, spec, eps_near))
    total = 0.0
    if losses_3d:
        total += spec.lambda_3d * (sum(losses_3d) / len(losses_3d))
    if losses_2d:
        total += spec.lambda_2d * (sum(losses_2d) / len(losses_2d))
    return total


def centerness_target(box2d: Box2D, location, sigma_scale: float = 1.0 / 6.0) -> float:
    """Gaussian center-ness in [0, 1] of a pixel location relative to a 2D box.

    The Gaussian is centered on the box center with per-axis sigma equal to
    ``sigma_scale`` times the box width and height.
    """
    if box2d.area <= 0.0:
        raise ValueError("centerness target requires a positive-area box")
    u_c, v_c = box2d.center
    sigma_u = sigma_scale * box2d.width
    sigma_v = sigma_scale * box2d.height
    du = (location[0] - u_c) / sigma_u
    dv = (location[1] - v_c) / sigma_v
    return math.exp(-0.5 * (du * du + dv * dv))


def fd_gradient(fn: Callable[[np.ndarray], float], params: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Central-difference gradient of a scalar function of a parameter vector.

    Raises:
        NonFiniteError: a probe evaluation returned a non-finite value.
    """
    params = np.asarray(params, dtype=float)
    grad = np.empty(len(params))
    for k in range(len(params)):
        probe = params.copy()
        probe[k] = params[k] + h[k]
        hi = fn(probe)
        probe[k] = params[k] - h[k]
        lo = fn(probe)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NonFiniteError(f"non-finite loss while probing parameter {k}")
        grad[k] = (hi - lo) / (2.0 * h[k])
    return grad


def grad_fd(loss: Callable[[Box3D], float], at: Box3D, h=1e-4) -> np.ndarray:
    """Central-difference 7-gradient of a box-valued loss.

    ``h`` is a scalar or per-parameter step array (meters for position/size,
    radians for yaw).
    """
    steps = np.broadcast_to(np.asarray(h, dtype=float), (7,)).copy()
    return fd_gradient(lambda p: loss(Box3D.from_params(p)), at.to_params(), steps)
