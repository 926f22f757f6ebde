"""Experiment harness: scene generation, recovery sweeps, and reports.

Subcommands
    generate         write scene.json and labels.json for a synthetic scene
    sweep-intervals  recover every object under a grid of temporal offset sets
    hybrid           sweep the 3D/2D supervision ratio under several split modes
    stratify         aggregate recovery errors by distance, class, and motion
    probe            sample the loss along a parameter direction
    check            run the runtime invariant suite

Each run is reproducible from its config plus seed; the resolved config is
embedded in the run manifest next to the CSV.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from statistics import mean, median

import numpy as np

from . import report
from .errors import ConfigError, WarpboxError
from .harness import (
    HYBRID_SPLIT_MODES,
    collect_cases,
    distance_band,
    hybrid_priority_order,
    run_population,
    select_3d_ids,
)
from .recovery import RecoveryConfig, ambiguity_probe, depth_ray_direction
from .simworld import (
    SceneConfig,
    generate_scene,
    jitter_labels,
    load_scene,
    render_labels,
    save_labels,
    save_scene,
)
from .supervision import SupervisionSpec
from .selfcheck import run_checks

DEFAULT_OFFSET_SETS = ((0,), (0, 1), (0, 2), (0, 3), (-1, 0, 1), (-2, 0, 2), (-3, 0, 3))
DEFAULT_RHOS = (0.0, 0.05, 0.25, 0.5, 1.0)

OBJECT_COLUMNS = [
    "row",
    "offsets",
    "track_id",
    "pseudo_class",
    "moving",
    "distance",
    "distance_band",
    "ate",
    "ate_ground",
    "ase",
    "aoe",
    "depth_error",
    "final_loss",
    "iterations",
    "converged",
    "status",
]


def default_config(command: str) -> dict:
    config = {
        "seed": 0,
        "scene": {},
        "supervision": {"offsets": [-3, 0, 3]},
        "recovery": {},
        "jitter_scale": 0.0,
        "distance_range": [8.0, 45.0],
        "max_objects": 50,
    }
    if command == "sweep-intervals":
        config["offset_sets"] = [list(s) for s in DEFAULT_OFFSET_SETS]
    if command == "hybrid":
        config["rhos"] = list(DEFAULT_RHOS)
        config["modes"] = list(HYBRID_SPLIT_MODES)
        config["dist_band"] = [0.0, 20.0]
        config["size_threshold"] = 96.0 * 96.0
    if command == "probe":
        config["probe"] = {
            "track_id": None,
            "direction": "depth-ray",
            "span": [-0.3, 0.3],
            "n_samples": 41,
            "center_scale": 1.1,
            "size_scale": 1.25,
        }
    return config


def load_config(command: str, path: str | None, seed: int | None) -> dict:
    config = default_config(command)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(config.get(key), dict):
                config[key].update(value)
            else:
                config[key] = value
    if seed is not None:
        config["seed"] = seed
    return config


def resolve_scene(config: dict):
    scene_cfg = dict(config.get("scene", {}))
    path = scene_cfg.pop("path", None)
    if path is not None:
        scene = load_scene(path)
    else:
        scene_cfg.setdefault("seed", config["seed"])
        for key in ("speed_range", "spawn_distance", "camera_yaws_deg", "class_weights"):
            if key in scene_cfg and isinstance(scene_cfg[key], list):
                scene_cfg[key] = tuple(
                    tuple(v) if isinstance(v, list) else v for v in scene_cfg[key]
                )
        scene = generate_scene(SceneConfig(**scene_cfg))
    labels = render_labels(scene)
    jitter = float(config.get("jitter_scale", 0.0))
    if jitter > 0.0:
        labels = jitter_labels(labels, jitter, seed=int(config.get("jitter_seed", config["seed"] + 1)))
    return scene, labels


def build_population(scene, labels, offsets, config: dict):
    lo, hi = config.get("distance_range", [0.0, math.inf])
    cases = [c for c in collect_cases(scene, labels, offsets) if lo <= c.distance <= hi]
    max_objects = config.get("max_objects")
    if max_objects:
        cases = cases[: int(max_objects)]
    return cases


def recovery_config(config: dict, offsets) -> RecoveryConfig:
    spec_kwargs = dict(config.get("supervision", {}))
    spec_kwargs["offsets"] = tuple(offsets)
    spec = SupervisionSpec(**spec_kwargs)
    rec_kwargs = dict(config.get("recovery", {}))
    if "size_prior" in rec_kwargs:
        rec_kwargs["size_prior"] = tuple(rec_kwargs["size_prior"])
    return RecoveryConfig(spec=spec, **rec_kwargs)


def outcome_row(outcome, offsets) -> dict:
    case = outcome.case
    row = {
        "row": "object",
        "offsets": offsets_label(offsets),
        "track_id": case.track_id,
        "pseudo_class": case.pseudo_class,
        "moving": case.moving,
        "distance": case.distance,
        "distance_band": distance_band(case.distance),
        "status": "ok" if outcome.ok else outcome.error,
    }
    if outcome.ok:
        result = outcome.result
        row.update(
            ate=result.metrics["ate"],
            ate_ground=result.metrics["ate_ground"],
            ase=result.metrics["ase"],
            aoe=result.metrics["aoe"],
            depth_error=outcome.depth_error,
            final_loss=result.final_loss,
            iterations=result.iterations,
            converged=result.converged,
        )
    return row


def offsets_label(offsets) -> str:
    return ",".join(str(d) for d in offsets)


def median_rows(object_rows: list[dict], offsets) -> list[dict]:
    rows = []
    ok = [r for r in object_rows if r["status"] == "ok"]
    for group, members in (
        ("all", ok),
        ("moving", [r for r in ok if r["moving"]]),
        ("stationary", [r for r in ok if not r["moving"]]),
    ):
        if not members:
            continue
        rows.append(
            {
                "row": f"median-{group}",
                "offsets": offsets_label(offsets),
                "track_id": len(members),
                "ate": median(r["ate"] for r in members),
                "ate_ground": median(r["ate_ground"] for r in members),
                "ase": median(r["ase"] for r in members),
                "aoe": median(r["aoe"] for r in members),
                "depth_error": median(r["depth_error"] for r in members),
                "status": "ok",
            }
        )
    return rows


def cmd_generate(config: dict, out_dir: Path, args) -> int:
    scene, labels = resolve_scene(config)
    save_scene(scene, out_dir / "scene.json")
    save_labels(labels, out_dir / "labels.json")
    report.write_manifest(out_dir / "run_manifest.json", "generate", config, config["seed"])
    n_views = len(scene.frames[0].rig)
    n_movers = sum(tr.is_moving for tr in scene.tracks)
    print(
        f"scene: {len(scene.frames)} keyframes, {n_views} views, "
        f"{len(scene.tracks)} tracks ({n_movers} moving)"
    )
    print(f"labels: {labels.n_boxes()} boxes across {len(labels.frames)} frames")
    print(f"wrote {out_dir / 'scene.json'} and {out_dir / 'labels.json'}")
    return 0


def cmd_sweep_intervals(config: dict, out_dir: Path, args) -> int:
    scene, labels = resolve_scene(config)
    offset_sets = [tuple(int(d) for d in s) for s in config["offset_sets"]]
    union = sorted({d for s in offset_sets for d in s} | {0})
    cases = build_population(scene, labels, union, config)
    rows: list[dict] = []
    failures = 0
    for offsets in offset_sets:
        cfg = recovery_config(config, offsets)
        outcomes = run_population(cases, scene.frames, cfg, config["seed"], jobs=args.jobs)
        object_rows = [outcome_row(o, offsets) for o in outcomes]
        failures += sum(1 for r in object_rows if r["status"] != "ok")
        rows.extend(object_rows)
        rows.extend(median_rows(object_rows, offsets))
        done = [r for r in object_rows if r["status"] == "ok"]
        med = median(r["ate"] for r in done) if done else math.nan
        print(f"offsets {{{offsets_label(offsets)}}}: {len(done)}/{len(cases)} ok, median ATE {med:.4g} m")
    csv_path = out_dir / "sweep_intervals.csv"
    report.write_csv(csv_path, OBJECT_COLUMNS, rows, ["row", "offsets", "track_id"])
    report.write_manifest(out_dir / "run_manifest.json", "sweep-intervals", config, config["seed"])
    if not args.no_figures:
        report.figure_sweep_intervals(rows, out_dir / "sweep_intervals.png")
    print(f"wrote {csv_path}")
    return 1 if failures else 0


def cmd_hybrid(config: dict, out_dir: Path, args) -> int:
    scene, labels = resolve_scene(config)
    offsets = tuple(config["supervision"]["offsets"])
    cases = build_population(scene, labels, offsets, config)
    cfg = recovery_config(config, offsets)
    rng = np.random.default_rng(config["seed"])
    orders = {
        mode: hybrid_priority_order(
            cases,
            mode,
            rng,
            dist_band=tuple(config["dist_band"]),
            size_threshold=config["size_threshold"],
        )
        for mode in config["modes"]
    }

    # A result depends only on (object, branch), so each branch runs once.
    branch_cache: dict[tuple[int, bool], object] = {}

    def outcomes_for(ids_3d: frozenset):
        missing = [
            c for c in cases if (c.track_id, c.track_id in ids_3d) not in branch_cache
        ]
        for use_3d in (False, True):
            todo = [c for c in missing if (c.track_id in ids_3d) == use_3d]
            if todo:
                for case, outcome in zip(
                    todo,
                    run_population(
                        todo, scene.frames, cfg, config["seed"],
                        use_3d_ids=ids_3d, jobs=args.jobs,
                    ),
                ):
                    branch_cache[(case.track_id, use_3d)] = outcome
        return [branch_cache[(c.track_id, c.track_id in ids_3d)] for c in cases]

    rows = []
    failures = 0
    for mode in config["modes"]:
        for rho in config["rhos"]:
            ids_3d = select_3d_ids(orders[mode], float(rho))
            outcomes = outcomes_for(ids_3d)
            ok = [o for o in outcomes if o.ok]
            failures += len(outcomes) - len(ok)
            ates = [o.metric("ate") for o in ok]
            rows.append(
                {
                    "mode": mode,
                    "rho": float(rho),
                    "n_objects": len(cases),
                    "n_3d": len(ids_3d),
                    "n_failed": len(outcomes) - len(ok),
                    "mean_ate": mean(ates) if ates else math.nan,
                    "median_ate": median(ates) if ates else math.nan,
                    "mean_ate_ground": mean(o.metric("ate_ground") for o in ok) if ok else math.nan,
                    "mean_ase": mean(o.metric("ase") for o in ok) if ok else math.nan,
                    "median_ase": median(o.metric("ase") for o in ok) if ok else math.nan,
                    "mean_aoe": mean(o.metric("aoe") for o in ok) if ok else math.nan,
                    "median_aoe": median(o.metric("aoe") for o in ok) if ok else math.nan,
                }
            )
            print(f"mode {mode} rho {rho}: mean ATE {rows[-1]['mean_ate']:.4g} m (n_3d={len(ids_3d)})")
    csv_path = out_dir / "hybrid.csv"
    header = [
        "mode", "rho", "n_objects", "n_3d", "n_failed",
        "mean_ate", "median_ate", "mean_ate_ground",
        "mean_ase", "median_ase", "mean_aoe", "median_aoe",
    ]
    report.write_csv(csv_path, header, rows, ["mode", "rho"])
    report.write_manifest(out_dir / "run_manifest.json", "hybrid", config, config["seed"])
    if not args.no_figures:
        report.figure_hybrid(rows, out_dir / "hybrid.png")
    print(f"wrote {csv_path}")
    return 1 if failures else 0


def cmd_stratify(config: dict, out_dir: Path, args) -> int:
    scene, labels = resolve_scene(config)
    offsets = tuple(config["supervision"]["offsets"])
    cases = build_population(scene, labels, offsets, config)
    cfg = recovery_config(config, offsets)
    outcomes = run_population(cases, scene.frames, cfg, config["seed"], jobs=args.jobs)
    ok = [o for o in outcomes if o.ok]
    failures = len(outcomes) - len(ok)

    def strata():
        for lo, hi in ((2, 10), (10, 20), (20, 30), (30, 45), (45, 59)):
            members = [o for o in ok if lo <= o.case.distance < hi]
            yield "distance", f"{lo}-{hi}", members
        for cls in sorted({o.case.pseudo_class for o in ok}):
            yield "class", cls, [o for o in ok if o.case.pseudo_class == cls]
        yield "motion", "stationary", [o for o in ok if not o.case.moving]
        yield "motion", "moving", [o for o in ok if o.case.moving]

    rows = []
    for kind, group, members in strata():
        if not members:
            continue
        rows.append(
            {
                "group_kind": kind,
                "group": group,
                "n": len(members),
                "mean_ate": mean(o.metric("ate") for o in members),
                "median_ate": median(o.metric("ate") for o in members),
                "median_ate_ground": median(o.metric("ate_ground") for o in members),
                "median_ase": median(o.metric("ase") for o in members),
                "median_aoe": median(o.metric("aoe") for o in members),
                "median_depth_error": median(o.depth_error for o in members),
            }
        )
        print(f"{kind}/{group}: n={len(members)} median ATE {rows[-1]['median_ate']:.4g} m")
    csv_path = out_dir / "stratify.csv"
    header = [
        "group_kind", "group", "n", "mean_ate", "median_ate",
        "median_ate_ground", "median_ase", "median_aoe", "median_depth_error",
    ]
    report.write_csv(csv_path, header, rows, ["group_kind", "group"])
    report.write_manifest(out_dir / "run_manifest.json", "stratify", config, config["seed"])
    if not args.no_figures:
        report.figure_stratify(rows, out_dir / "stratify.png")
    print(f"wrote {csv_path}")
    return 1 if failures else 0


def cmd_probe(config: dict, out_dir: Path, args) -> int:
    scene, labels = resolve_scene(config)
    offsets = tuple(config["supervision"]["offsets"])
    cases = build_population(scene, labels, offsets, config)
    if not cases:
        raise ConfigError("no recoverable object found for probing")
    probe_cfg = config["probe"]
    case = cases[0]
    if probe_cfg.get("track_id") is not None:
        matches = [c for c in cases if c.track_id == probe_cfg["track_id"]]
        if not matches:
            raise ConfigError(f"track {probe_cfg['track_id']} not in the recoverable population")
        case = matches[0]

    from .boxes import Box3D

    box = Box3D(
        case.gt_box.center * float(probe_cfg.get("center_scale", 1.0)),
        case.gt_box.size * float(probe_cfg.get("size_scale", 1.0)),
        case.gt_box.yaw,
    )
    if probe_cfg["direction"] == "depth-ray":
        direction = depth_ray_direction(box)
    else:
        direction = np.asarray(probe_cfg["direction"], dtype=float)
    spec = SupervisionSpec(**{**config.get("supervision", {}), "offsets": offsets})
    labeled = case.labeled(
        reference_view_only=bool(probe_cfg.get("reference_view_only", False))
    )
    s_values, losses = ambiguity_probe(
        labeled,
        scene.frames,
        spec,
        box,
        direction,
        span=tuple(probe_cfg["span"]),
        n_samples=int(probe_cfg["n_samples"]),
    )
    rows = [{"s": float(s), "loss": float(v)} for s, v in zip(s_values, losses)]
    csv_path = out_dir / "probe.csv"
    report.write_csv(csv_path, ["s", "loss"], rows, ["s"])
    report.write_manifest(out_dir / "run_manifest.json", "probe", config, config["seed"])
    if not args.no_figures:
        report.figure_probe(rows, out_dir / "probe.png")
    finite = [r["loss"] for r in rows if math.isfinite(r["loss"])]
    spread = (max(finite) - min(finite)) if finite else math.nan
    print(f"probe: track {case.track_id}, {len(rows)} samples, loss spread {spread:.4g}")
    print(f"wrote {csv_path}")
    return 0


def cmd_check(config: dict, out_dir: Path, args) -> int:
    failures = run_checks()
    print(f"{failures} failure(s)" if failures else "all checks passed")
    return 1 if failures else 0


COMMANDS = {
    "generate": cmd_generate,
    "sweep-intervals": cmd_sweep_intervals,
    "hybrid": cmd_hybrid,
    "stratify": cmd_stratify,
    "probe": cmd_probe,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpbox", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=str, default=None, help="JSON config file")
        cmd.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        cmd.add_argument("--out", type=str, default=".", help="output directory")
        cmd.add_argument("--jobs", type=int, default=1, help="parallel recovery workers")
        cmd.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.command, args.config, args.seed)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](config, out_dir, args)
    except (WarpboxError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
