"""Per-object 7-DoF box recovery by first-order descent on the supervision losses.

Each object is optimized independently: central finite-difference gradients
of the configured loss (temporal 2D by default, smooth-L1 against the 3D
label when one is present) drive the descent.  The loss is piecewise smooth
with kinked valleys, which shapes the optimizer:

- parameters are (projected center, depth, angular sizes, yaw) in the
  reference camera, so the weakly constrained along-ray direction is a
  single axis rather than a diagonal valley;
- the default update is an adaptive per-parameter sign step (grow while the
  gradient sign holds, backtrack on flips or loss increases) with a
  single-coordinate fallback when the joint step is rejected; classic scaled
  gradient descent with Armijo backtracking is available as ``optimizer:
  "armijo"`` but stalls on the kinks;
- a pattern-move polish refines the kink-floor endgame, and a few seeded
  restarts re-draw the initialization when the loss stays high.

Translation, scale, and orientation errors against ground truth mirror the
usual per-object detection error measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Box2D, Box3D, EPS_NEAR, iou3d_aligned
from .errors import ConfigError, DivergenceError, NoObservationError, NonFiniteError
from .geometry import Intrinsics, wrap_angle
from .supervision import LabeledObject, SupervisionSpec, TemporalBoxLoss
from .warp import FrameContext, homography, warp_box


@dataclass(frozen=True)
class RecoveryConfig:
    """Per-object descent settings.

    ``optimizer`` selects the update rule: "adaptive" moves each parameter by
    its own sign-of-gradient step that grows while the gradient sign is stable
    and backtracks on sign flips or loss increases; "armijo" is scaled
    gradient descent with Armijo backtracking.  Both are first-order; adaptive
    is the default because the GIoU landscape's kinks stall a blended
    gradient direction (see the module notes).
    """

    spec: SupervisionSpec = field(default_factory=SupervisionSpec)
    max_iters: int = 2000
    tol: float = 1e-8
    patience: int = 20
    position_step: float = 0.1
    size_step_fraction: float = 0.05
    yaw_step: float = 0.05
    fd_step: float = 1e-4
    optimizer: str = "adaptive"
    line_search: bool = True
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    step_grow: float = 1.5
    step_cap: float = 16.0
    alpha_min: float = 1e-10
    alpha_max: float = 32.0
    init_strategy: str = "noisy-gt"
    init_depth_jitter: float = 0.3
    init_size_jitter: float = 0.2
    init_yaw_jitter: float = 0.3
    size_prior: tuple[float, float, float] = (1.9, 1.6, 4.5)
    depth_prior: float = 20.0
    eps_near: float = EPS_NEAR
    keep_param_trace: bool = False
    polish: bool = True
    polish_cycles: int = 60
    polish_tol: float = 1e-12
    max_restarts: int = 2
    restart_threshold: float = 5e-3

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if min(self.position_step, self.size_step_fraction, self.yaw_step, self.fd_step) <= 0:
            raise ConfigError("step sizes must be positive")
        if self.optimizer not in ("adaptive", "armijo"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.init_strategy not in ("noisy-gt", "prior"):
            raise ConfigError(f"unknown init strategy {self.init_strategy!r}")


@dataclass
class RecoveryResult:
    estimate: Box3D
    init: Box3D
    final_loss: float
    iterations: int
    converged: bool
    loss_trace: np.ndarray
    param_trace: np.ndarray | None = None
    metrics: dict | None = None


def eval_metrics(estimate: Box3D, gt: Box3D) -> tuple[float, float, float]:
    """(translation error m, scale error 1 - aligned IoU, orientation error rad)."""
    ate = float(np.linalg.norm(estimate.center - gt.center))
    ase = 1.0 - iou3d_aligned(estimate, gt)
    aoe = abs(wrap_angle(estimate.yaw - gt.yaw))
    return ate, ase, aoe


def ate_ground(estimate: Box3D, gt: Box3D) -> float:
    """Translation error projected onto the camera-frame ground plane (x-z)."""
    d = estimate.center - gt.center
    return float(math.hypot(d[0], d[2]))


def init_guess(obs: Box2D, intrinsics: Intrinsics, size_prior, depth_prior: float) -> Box3D:
    """Back-project a 2D box center to ``depth_prior`` with a given size and yaw 0."""
    if obs.area <= 0:
        raise ValueError("init_guess needs a positive-area observation")
    u_c, v_c = obs.center
    center = depth_prior * np.array(
        [(u_c - intrinsics.cx) / intrinsics.fx, (v_c - intrinsics.cy) / intrinsics.fy, 1.0]
    )
    return Box3D(center, np.asarray(size_prior, dtype=float), 0.0)


def depth_ray_direction(box: Box3D) -> np.ndarray:
    """Parameter direction that rescales the box about the camera origin.

    Moving along it changes depth while leaving the projected outline fixed;
    the scalar coordinate is the fractional scale change.
    """
    return np.concatenate([box.center, box.size, [0.0]])


def _reference_observation(labels: LabeledObject) -> tuple[int, str, Box2D]:
    """The (offset, view, box) anchoring initialization: offset 0 and the
    reference view when available, otherwise the nearest labeled offset."""
    candidates = []
    for dt in sorted(labels.labels2d, key=lambda d: (abs(d), d)):
        views = labels.labels2d[dt]
        if labels.view_id in views:
            candidates.append((dt, labels.view_id, views[labels.view_id]))
        for view_id in sorted(views):
            if view_id != labels.view_id:
                candidates.append((dt, view_id, views[view_id]))
    if not candidates:
        raise NoObservationError(f"track {labels.track_id}: no 2D label to initialize from")
    return candidates[0]


def _initial_box(
    labels: LabeledObject,
    trajectory: Sequence[FrameContext],
    cfg: RecoveryConfig,
    gt_box: Box3D | None,
    rng: np.random.Generator | None,
) -> Box3D:
    """Initial box in the reference view's frame at the reference keyframe."""
    dt, view_id, obs = _reference_observation(labels)
    obs_frame = trajectory[labels.frame_index + dt]
    obs_cam = obs_frame.camera(view_id)

    same_frame = dt == 0 and view_id == labels.view_id
    ref_frame = trajectory[labels.frame_index]

    def to_reference(box: Box3D) -> Box3D:
        if same_frame:
            return box
        transform = homography(obs_cam, obs_frame, ref_frame, ref_frame.camera(labels.view_id))
        return warp_box(box, transform)

    if cfg.init_strategy == "prior":
        return to_reference(init_guess(obs, obs_cam.intrinsics, cfg.size_prior, cfg.depth_prior))

    anchor = gt_box if gt_box is not None else labels.box3d
    if anchor is None:
        raise ConfigError("noisy-gt initialization needs a ground-truth box")
    if rng is None:
        rng = np.random.default_rng(0)
    depth = float(anchor.center[2]) * (1.0 + rng.uniform(-1, 1) * cfg.init_depth_jitter)
    size = anchor.size * (1.0 + rng.uniform(-1, 1, size=3) * cfg.init_size_jitter)
    guess = to_reference(init_guess(obs, obs_cam.intrinsics, size, depth))
    yaw = anchor.yaw + rng.uniform(-1, 1) * cfg.init_yaw_jitter
    return Box3D(guess.center, guess.size, yaw)


def _loss3d_batch_fn(gt: Box3D, spec: SupervisionSpec):
    gt_params = gt.to_params()
    weights = np.array(spec.param_weights)
    beta = spec.smooth_l1_beta

    def fn(params: np.ndarray) -> np.ndarray:
        residuals = params - gt_params
        residuals[:, 6] = wrap_angle(residuals[:, 6])
        a = np.abs(residuals)
        per_param = np.where(a < beta, 0.5 * residuals * residuals / beta, a - 0.5 * beta)
        losses = per_param @ weights
        bad = np.any(params[:, 3:6] <= 0.0, axis=1)
        losses[bad] = math.inf
        return losses

    return fn


class _CameraParams:
    """(u, v, depth, angular sizes, yaw) parameterization anchored to one camera.

    The center is ``depth * ray(u, v)`` and sizes are stored relative to depth,
    so changing the depth coordinate alone slides the box along its ray with a
    fixed projected outline.  This mirrors how monocular detector heads split
    projected-center offsets and depth, and it turns the weakly constrained
    along-ray direction into a single axis that plain gradient descent can
    follow; in raw (x, y, z, w, h, l) space that direction is a diagonal
    valley that stalls coordinate-scaled descent.
    """

    def __init__(self, intrinsics: Intrinsics):
        self.fx, self.fy = intrinsics.fx, intrinsics.fy
        self.cx, self.cy = intrinsics.cx, intrinsics.cy

    def from_box_params(self, p: np.ndarray) -> np.ndarray:
        q = p.copy()
        x, y, z = p[:3]
        q[0] = self.fx * x / z + self.cx
        q[1] = self.fy * y / z + self.cy
        q[2] = z
        q[3:6] = p[3:6] / z
        return q

    def to_box_params(self, q: np.ndarray) -> np.ndarray:
        p = q.copy()
        depth = q[2]
        p[0] = depth * (q[0] - self.cx) / self.fx
        p[1] = depth * (q[1] - self.cy) / self.fy
        p[2] = depth
        p[3:6] = q[3:6] * depth
        return p

    def to_box_params_batch(self, q: np.ndarray) -> np.ndarray:
        p = q.copy()
        depth = q[:, 2]
        p[:, 0] = depth * (q[:, 0] - self.cx) / self.fx
        p[:, 1] = depth * (q[:, 1] - self.cy) / self.fy
        p[:, 3:6] = q[:, 3:6] * depth[:, None]
        return p


def _coordinate_polish(
    fn,
    params: np.ndarray,
    f: float,
    steps: np.ndarray,
    lower_bounds: np.ndarray,
    max_cycles: int,
    tol: float,
) -> tuple[np.ndarray, float, int]:
    """Hooke-Jeeves style endgame: per-coordinate probes plus pattern moves.

    Sign-gradient steps stall once they alias the kink scale of the GIoU
    surface, whose residual minima sit at the bottom of diagonal trenches.
    Exploratory coordinate probes with halving widths find a descent
    composite, and doubling extrapolations along each cycle's net
    displacement ride the trench the rest of the way down.
    """
    evals = 0
    widths = steps.copy()
    floor = steps * 1e-9
    for _ in range(max_cycles):
        start_f = f
        start_params = params.copy()
        for k in range(len(params)):
            width = widths[k]
            moves = 0
            while width > floor[k] and moves < 60:
                improved = False
                for direction in (1.0, -1.0):
                    candidate = params.copy()
                    candidate[k] = max(candidate[k] + direction * width, lower_bounds[k])
                    f_new = fn(candidate)
                    evals += 1
                    if f_new < f:
                        params, f = candidate, f_new
                        improved = True
                        moves += 1
                        break
                if not improved:
                    width *= 0.5
            widths[k] = max(width * 16.0, floor[k])
        # Pattern move: extrapolate the cycle's composite displacement.
        pattern = params - start_params
        while np.any(pattern != 0.0):
            candidate = np.maximum(params + pattern, lower_bounds)
            f_new = fn(candidate)
            evals += 1
            if f_new >= f:
                break
            params, f = candidate, f_new
            pattern *= 2.0
        if start_f - f < tol:
            break
    return params, f, evals


def recover_box(
    labels: LabeledObject,
    trajectory: Sequence[FrameContext],
    cfg: RecoveryConfig,
    gt_box: Box3D | None = None,
    rng: np.random.Generator | None = None,
) -> RecoveryResult:
    """Descend the supervision loss from a back-projected initial guess.

    Objects carrying a 3D supervision target descend the smooth-L1 parameter
    loss; all others descend the temporal 2D loss over ``cfg.spec.offsets``.
    Metrics are filled in when a ground-truth box is available.

    Raises:
        NoObservationError: the initial guess has no valid supervision term.
        DivergenceError: the loss exceeded 10x its initial value.
    """
    if labels.box3d is not None:
        loss_batch = _loss3d_batch_fn(labels.box3d, cfg.spec)
    else:
        loss_batch = TemporalBoxLoss(labels, trajectory, cfg.spec, cfg.eps_near).value_batch

    src_cam = trajectory[labels.frame_index].camera(labels.view_id)
    coords = _CameraParams(src_cam.intrinsics)

    def fn_batch(q: np.ndarray) -> np.ndarray:
        return loss_batch(coords.to_box_params_batch(q))

    def fn(q: np.ndarray) -> float:
        return float(fn_batch(q[None, :])[0])

    best = None
    total_iterations = 0
    for attempt in range(max(1, cfg.max_restarts + 1)):
        try:
            init_box = _initial_box(labels, trajectory, cfg, gt_box, rng)
        except NoObservationError:
            if attempt == 0:
                raise
            break
        outcome = _descend(fn, fn_batch, coords, init_box, cfg, labels.track_id)
        if outcome is None:
            if attempt == 0:
                raise NoObservationError(
                    f"track {labels.track_id}: initial guess yields no valid supervision term"
                )
            continue
        total_iterations += outcome[4]
        if best is None or outcome[1] < best[1]:
            best = outcome
        if best[1] <= cfg.restart_threshold or rng is None or cfg.init_strategy == "prior":
            break

    params, f, trace, param_trace, _, converged, init_box = best
    estimate = Box3D.from_params(coords.to_box_params(params))
    result = RecoveryResult(
        estimate=estimate,
        init=init_box,
        final_loss=f,
        iterations=total_iterations,
        converged=converged,
        loss_trace=np.array(trace),
        param_trace=np.array(param_trace) if param_trace is not None else None,
    )
    reference = gt_box if gt_box is not None else labels.box3d
    if reference is not None:
        ate, ase, aoe = eval_metrics(estimate, reference)
        result.metrics = {
            "ate": ate,
            "ate_ground": ate_ground(estimate, reference),
            "ase": ase,
            "aoe": aoe,
        }
    return result


def _fd_gradient_batch(fn_batch, params: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Central differences over all parameters in one batched evaluation."""
    n = len(params)
    probes = np.repeat(params[None, :], 2 * n, axis=0)
    idx = np.arange(n)
    probes[2 * idx, idx] += h
    probes[2 * idx + 1, idx] -= h
    values = fn_batch(probes)
    if not np.all(np.isfinite(values)):
        bad = int(np.nonzero(~np.isfinite(values))[0][0]) // 2
        raise NonFiniteError(f"non-finite loss while probing parameter {bad}")
    return (values[2 * idx] - values[2 * idx + 1]) / (2.0 * h)


def _descend(fn, fn_batch, coords: _CameraParams, init_box: Box3D, cfg: RecoveryConfig, track_id: int):
    """One descent run; returns (params, loss, trace, param_trace, iterations,
    converged, init_box) or None when the init has no valid term."""
    params = coords.from_box_params(init_box.to_params())
    f = fn(params)
    if not math.isfinite(f):
        return None

    init_depth = max(abs(float(init_box.center[2])), 1.0)
    px_step = coords.fx * cfg.position_step / init_depth
    steps = np.array(
        [
            px_step,
            px_step,
            cfg.position_step,
            cfg.size_step_fraction * init_box.size[0] / init_depth,
            cfg.size_step_fraction * init_box.size[1] / init_depth,
            cfg.size_step_fraction * init_box.size[2] / init_depth,
            cfg.yaw_step,
        ]
    )
    fd_steps = steps * (cfg.fd_step / cfg.position_step)

    f0 = f
    trace = [f]
    param_trace = [coords.to_box_params(params)] if cfg.keep_param_trace else None
    flat_streak = 0
    converged = False
    iterations = 0
    alpha_start = 1.0
    live_steps = steps.copy()
    step_floor = steps * 1e-7
    step_cap = steps * cfg.step_cap
    prev_sign = np.zeros(7)
    # Depth and angular sizes must stay clear of the FD probe radius or the
    # gradient probes would cross zero size / the camera plane.
    lower_bounds = np.full(7, -np.inf)
    lower_bounds[2:6] = 4.0 * fd_steps[2:6]

    def clamp(q: np.ndarray) -> np.ndarray:
        return np.maximum(q, lower_bounds)

    for iterations in range(1, cfg.max_iters + 1):
        grad = _fd_gradient_batch(fn_batch, params, fd_steps)
        moved = True

        if cfg.optimizer == "adaptive":
            sign = np.sign(grad)
            if not np.any(sign):
                converged = True
                break
            candidate = clamp(params - sign * live_steps)
            f_new = fn(candidate)
            if cfg.line_search and not (f_new <= f):
                # The blended move failed; a single coordinate often still
                # descends (kinked coordinates block the joint step).
                accepted_k = None
                for k in np.argsort(-np.abs(grad * live_steps)):
                    if sign[k] == 0:
                        continue
                    single = params.copy()
                    single[k] -= sign[k] * live_steps[k]
                    single = clamp(single)
                    f_single = fn(single)
                    if f_single < f:
                        candidate, f_new, accepted_k = single, f_single, int(k)
                        break
                if accepted_k is None:
                    live_steps *= cfg.backtrack_factor
                    moved = False
                    f_new = f
                    if np.all(live_steps < step_floor):
                        converged = True
                        break
                else:
                    live_steps[accepted_k] = min(
                        live_steps[accepted_k] * cfg.step_grow, step_cap[accepted_k]
                    )
            else:
                flipped = sign * prev_sign < 0
                live_steps[flipped] *= cfg.backtrack_factor
                live_steps[~flipped & (sign != 0)] *= cfg.step_grow
                np.clip(live_steps, None, step_cap, out=live_steps)
                prev_sign = sign
        else:
            scaled_norm = float(np.linalg.norm(grad * steps))
            if scaled_norm == 0.0:
                converged = True
                break
            # Unit direction in step-scaled coordinates: alpha counts how many
            # per-parameter steps one move spans; the Armijo slope is -|g|.
            direction = -(steps * steps * grad) / scaled_norm
            slope = -scaled_norm
            if cfg.line_search:
                alpha = alpha_start
                accepted = False
                while alpha >= cfg.alpha_min:
                    candidate = clamp(params + alpha * direction)
                    f_new = fn(candidate)
                    if f_new <= f + cfg.armijo_c * alpha * slope:
                        accepted = True
                        break
                    alpha *= cfg.backtrack_factor
                if not accepted:
                    converged = True
                    break
                alpha_start = min(alpha / cfg.backtrack_factor, cfg.alpha_max)
            else:
                candidate = clamp(params + direction)
                f_new = fn(candidate)
                if not math.isfinite(f_new):
                    break

        decrease = f - f_new
        if moved:
            params, f = candidate, f_new
            trace.append(f)
            if param_trace is not None:
                param_trace.append(coords.to_box_params(params))
        if f > 10.0 * f0 and f0 > 0.0:
            raise DivergenceError(
                f"track {track_id}: loss {f:.3e} exceeded 10x initial {f0:.3e}"
            )
        if decrease < cfg.tol:
            flat_streak += 1
            if flat_streak >= cfg.patience:
                converged = True
                break
        else:
            flat_streak = 0

    if cfg.polish and cfg.line_search:
        params, f, _ = _coordinate_polish(
            fn, params, f, steps, lower_bounds, cfg.polish_cycles, cfg.polish_tol
        )
        trace.append(f)
        if param_trace is not None:
            param_trace.append(coords.to_box_params(params))

    return params, f, trace, param_trace, iterations, converged, init_box


def ambiguity_probe(
    labels: LabeledObject,
    trajectory: Sequence[FrameContext],
    spec: SupervisionSpec,
    box: Box3D,
    direction: np.ndarray,
    span: tuple[float, float] = (-0.3, 0.3),
    n_samples: int = 41,
    eps_near: float = EPS_NEAR,
) -> tuple[np.ndarray, np.ndarray]:
    """Loss profile along a parameter-space direction through ``box``.

    Returns the sampled coordinates and loss values; samples where the warped
    box leaves every camera come back as ``inf``.
    """
    direction = np.asarray(direction, dtype=float).reshape(7)
    if not np.any(direction != 0.0):
        raise ValueError("probe direction must be non-zero")
    fn = TemporalBoxLoss(labels, trajectory, spec, eps_near).value
    params = box.to_params()
    s_values = np.linspace(span[0], span[1], n_samples)
    losses = np.array([fn(params + s * direction) for s in s_values])
    return s_values, losses
