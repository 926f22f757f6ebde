"""Population assembly and experiment runners over synthetic scenes.

Turns rendered scene labels into per-object recovery cases (reference frame,
reference view, per-offset multi-view 2D labels, ground-truth box), runs
recoveries with per-object seeded randomness, and aggregates errors.  Results
are independent of scheduling because each object's random stream derives
from (master seed, track id).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from statistics import mean, median
from typing import Iterable, Sequence

import numpy as np

from .boxes import Box3D
from .errors import WarpboxError
from .recovery import RecoveryConfig, RecoveryResult, recover_box
from .simworld import Scene, SceneLabels
from .supervision import LabeledObject

#: Distance strata (meters), matching the reporting bands used throughout.
DISTANCE_BANDS = ((2.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 45.0), (45.0, 59.0))

#: 2D-box area threshold (px^2) separating "large" objects, COCO-style.
LARGE_AREA_THRESHOLD = 96.0 * 96.0

HYBRID_SPLIT_MODES = (
    "random-instance",
    "random-frame",
    "moving-only",
    "distance-band",
    "size-band",
)


def distance_band(distance: float) -> str:
    for lo, hi in DISTANCE_BANDS:
        if lo <= distance < hi:
            return f"{lo:g}-{hi:g}"
    return "other"


@dataclass(frozen=True)
class ObjectCase:
    """One recoverable object: its labels around a reference frame plus ground truth."""

    track_id: int
    pseudo_class: str
    moving: bool
    frame_index: int
    view_id: str
    labels2d: dict
    gt_box: Box3D
    distance: float
    label_area: float

    def labeled(self, use_3d: bool = False, reference_view_only: bool = False) -> LabeledObject:
        """Supervision view of this case.

        ``reference_view_only`` drops outer-view labels; overlapping cameras
        at the same keyframe act as a stereo pair, which defeats experiments
        that rely on single-view depth ambiguity.
        """
        labels2d = self.labels2d
        if reference_view_only:
            labels2d = {
                dt: {v: b for v, b in views.items() if v == self.view_id}
                for dt, views in self.labels2d.items()
            }
        return LabeledObject(
            track_id=self.track_id,
            frame_index=self.frame_index,
            view_id=self.view_id,
            labels2d=labels2d,
            box3d=self.gt_box if use_3d else None,
        )


def collect_cases(
    scene: Scene,
    labels: SceneLabels,
    offsets: Sequence[int],
) -> list[ObjectCase]:
    """Build one case per track that is observable at every requested offset.

    The reference frame is the middle frame among those where the track has a
    label at the frame itself and at every offset; the reference view is the
    largest-area label there.  Tracks never satisfying this are skipped.
    """
    offsets = sorted(set(int(d) for d in offsets) | {0})
    n_frames = len(scene.frames)
    cases = []
    for track in scene.tracks:
        candidates = []
        for k in range(n_frames):
            if any(not (0 <= k + d < n_frames) for d in offsets):
                continue
            if all(labels.views_of(track.track_id, k + d) for d in offsets):
                candidates.append(k)
        if not candidates:
            continue
        ref = candidates[len(candidates) // 2]

        per_offset: dict = {}
        for d in offsets:
            views = {}
            for view_id in labels.views_of(track.track_id, ref + d):
                views[view_id] = labels.frames[ref + d][view_id][track.track_id].box2d
            per_offset[d] = views

        def clipped(view_id: str) -> float:
            box2d = per_offset[0][view_id]
            k = scene.frames[ref].camera(view_id).intrinsics
            return box2d.clipped_area(k.width, k.height)

        ref_view = max(sorted(per_offset[0]), key=clipped)
        gt_box = labels.frames[ref][ref_view][track.track_id].box3d
        ego_xy = scene.frames[ref].ego_pose.translation[:2]
        dist = float(np.linalg.norm(track.center_at(scene.frames[ref].timestamp)[:2] - ego_xy))
        cases.append(
            ObjectCase(
                track_id=track.track_id,
                pseudo_class=track.pseudo_class,
                moving=track.is_moving,
                frame_index=ref,
                view_id=ref_view,
                labels2d=per_offset,
                gt_box=gt_box,
                distance=dist,
                label_area=clipped(ref_view),
            )
        )
    return cases


def object_rng(master_seed: int, track_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master_seed, track_id)))


@dataclass
class CaseOutcome:
    case: ObjectCase
    branch: str  # "2d" or "3d"
    result: RecoveryResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None

    def metric(self, name: str) -> float:
        assert self.result is not None and self.result.metrics is not None
        return self.result.metrics[name]

    @property
    def depth_error(self) -> float:
        assert self.result is not None
        return abs(float(self.result.estimate.center[2] - self.case.gt_box.center[2]))


def run_case(
    case: ObjectCase,
    trajectory,
    cfg: RecoveryConfig,
    master_seed: int,
    use_3d: bool = False,
) -> CaseOutcome:
    branch = "3d" if use_3d else "2d"
    try:
        result = recover_box(
            case.labeled(use_3d),
            trajectory,
            cfg,
            gt_box=case.gt_box,
            rng=object_rng(master_seed, case.track_id),
        )
        return CaseOutcome(case, branch, result)
    except WarpboxError as exc:
        return CaseOutcome(case, branch, None, error=f"{type(exc).__name__}: {exc}")


def _run_case_args(args) -> CaseOutcome:
    return run_case(*args)


def run_population(
    cases: Sequence[ObjectCase],
    trajectory,
    cfg: RecoveryConfig,
    master_seed: int,
    use_3d_ids: frozenset | set = frozenset(),
    jobs: int = 1,
) -> list[CaseOutcome]:
    """Recover every case, optionally across processes; output order is fixed."""
    tasks = [
        (case, trajectory, cfg, master_seed, case.track_id in use_3d_ids) for case in cases
    ]
    if jobs <= 1 or len(tasks) < 2:
        return [_run_case_args(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_case_args, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def median_metric(outcomes: Iterable[CaseOutcome], name: str) -> float:
    values = [o.metric(name) for o in outcomes if o.ok]
    return median(values) if values else math.nan


def mean_metric(outcomes: Iterable[CaseOutcome], name: str) -> float:
    values = [o.metric(name) for o in outcomes if o.ok]
    return mean(values) if values else math.nan


def median_depth_error(outcomes: Iterable[CaseOutcome]) -> float:
    values = [o.depth_error for o in outcomes if o.ok]
    return median(values) if values else math.nan


def hybrid_priority_order(
    cases: Sequence[ObjectCase],
    mode: str,
    rng: np.random.Generator,
    dist_band: tuple[float, float] = (0.0, 20.0),
    size_threshold: float = LARGE_AREA_THRESHOLD,
) -> list[int]:
    """Track ids ordered by 3D-annotation priority for a split mode.

    Budgets are nested: the 3D-supervised set for ratio r is the first
    ``round(r * n)`` ids of this order, so larger budgets contain smaller ones.
    """
    ids = [c.track_id for c in cases]
    by_id = {c.track_id: c for c in cases}
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    if mode == "random-instance":
        return shuffled
    if mode == "random-frame":
        frames = sorted({by_id[i].frame_index for i in ids})
        frame_order = {f: r for r, f in zip(rng.permutation(len(frames)), frames)}
        return sorted(shuffled, key=lambda i: frame_order[by_id[i].frame_index])
    if mode == "moving-only":
        return sorted(shuffled, key=lambda i: not by_id[i].moving)
    if mode == "distance-band":
        lo, hi = dist_band
        return sorted(shuffled, key=lambda i: not (lo <= by_id[i].distance < hi))
    if mode == "size-band":
        return sorted(shuffled, key=lambda i: by_id[i].label_area < size_threshold)
    raise ValueError(f"unknown split mode {mode!r}")


def select_3d_ids(order: Sequence[int], rho: float) -> frozenset:
    n_3d = int(round(rho * len(order)))
    return frozenset(order[:n_3d])
