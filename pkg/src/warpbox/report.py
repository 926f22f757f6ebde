"""CSV and figure output for experiment runs.

Every command writes a versioned CSV (floats at 9 significant digits, rows
canonically sorted) plus a run manifest, and renders a small matplotlib
figure next to the CSV unless figures are disabled.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

CSV_SCHEMA_VERSION = 1


def format_value(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".9g")
    if value is None:
        return ""
    return str(value)


def write_csv(path, header: list[str], rows: list[dict], sort_keys: list[str]) -> None:
    """Write rows sorted by ``sort_keys`` so parallel runs serialize identically."""
    ordered = sorted(rows, key=lambda r: tuple(format_value(r.get(k)) for k in sort_keys))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in ordered:
            writer.writerow([format_value(row.get(col)) for col in header])


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_manifest(path, command: str, config: dict, seed: int) -> None:
    import warpbox

    manifest = {
        "command": command,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "config": config,
        "config_sha256": config_hash(config),
        "seed": seed,
        "versions": {
            "warpbox": warpbox.__version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "platform": platform.platform(),
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _finite(values):
    return [v for v in values if v is not None and math.isfinite(v)]


def figure_sweep_intervals(rows: list[dict], path) -> None:
    """Median ATE per offset set, movers and stationary objects separately."""
    groups = defaultdict(lambda: defaultdict(list))
    for row in rows:
        if row.get("row") == "object" and row.get("status") == "ok":
            groups[row["offsets"]][bool(row["moving"])].append(row["ate"])
    offset_sets = sorted(groups, key=lambda s: (len(s.split()), s))
    x = np.arange(len(offset_sets))
    fig, ax = plt.subplots(figsize=(7, 4))
    for moving, label, marker in ((False, "stationary", "o"), (True, "moving", "s")):
        medians = [
            np.median(_finite(groups[s][moving])) if groups[s][moving] else np.nan
            for s in offset_sets
        ]
        ax.plot(x, medians, marker=marker, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(offset_sets, rotation=30, ha="right")
    ax.set_xlabel("offset set")
    ax.set_ylabel("median ATE (m)")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_hybrid(rows: list[dict], path) -> None:
    """Mean ATE against the 3D-annotation ratio, one line per split mode."""
    by_mode = defaultdict(list)
    for row in rows:
        by_mode[row["mode"]].append((row["rho"], row["mean_ate"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for mode in sorted(by_mode):
        pts = sorted(by_mode[mode])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("fraction of objects with 3D labels")
    ax.set_ylabel("mean ATE (m)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_stratify(rows: list[dict], path) -> None:
    """One bar panel per stratification kind."""
    kinds = sorted({row["group_kind"] for row in rows})
    fig, axes = plt.subplots(1, max(len(kinds), 1), figsize=(4 * max(len(kinds), 1), 4))
    if len(kinds) <= 1:
        axes = [axes]
    for ax, kind in zip(axes, kinds):
        sub = [r for r in rows if r["group_kind"] == kind]
        labels = [r["group"] for r in sub]
        ax.bar(range(len(sub)), [r["median_ate"] for r in sub])
        ax.set_xticks(range(len(sub)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_title(kind)
        ax.set_ylabel("median ATE (m)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_probe(rows: list[dict], path) -> None:
    """Loss profile along the probed direction."""
    pts = sorted((row["s"], row["loss"]) for row in rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".")
    ax.set_xlabel("probe coordinate")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
