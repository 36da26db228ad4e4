"""Static figures: loss curves, per-hierarchy error bars and skeleton views."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .skeleton import SkeletonTopology  # noqa: E402

FORMATS = (".png", ".svg", ".pdf")


def _save(fig, path) -> Path:
    path = Path(path)
    if path.suffix.lower() not in FORMATS:
        raise ValueError(f"unsupported figure format {path.suffix!r}; use one of {FORMATS}")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(curves: dict[str, list], path, key: str = "L_total", window: int = 20) -> Path:
    """One line per run; ``curves`` maps a label to its metrics-log records."""
    from .training import moving_average

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, records in curves.items():
        if not records:
            continue
        steps = np.array([r["step"] for r in records])
        vals = moving_average([r[key] for r in records], window)
        ax.plot(steps[len(steps) - len(vals):], vals, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(f"{key} (moving average)")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_hierarchy_errors(reports: dict[str, dict], path, unit: str = "") -> Path:
    """Grouped bars of per-hierarchy MPJPE; ``reports`` maps a label to {level: error}."""
    labels = list(reports)
    levels = sorted({int(k) for r in reports.values() for k in r})
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(levels))
    for i, label in enumerate(labels):
        r = {int(k): v for k, v in reports[label].items()}
        ax.bar(x + i * width, [r.get(lv, np.nan) for lv in levels], width, label=label)
    ax.set_xticks(x + width * (len(labels) - 1) / 2)
    ax.set_xticklabels([str(lv) for lv in levels])
    ax.set_xlabel("hierarchy level")
    ax.set_ylabel(f"MPJPE {unit}".strip())
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_skeleton(pose: np.ndarray, topo: SkeletonTopology, path, gt: np.ndarray | None = None) -> Path:
    """3D view of one (J, 3) pose, optionally overlaid on a reference pose."""
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="3d")
    for p, style in ((gt, "tab:gray"), (pose, "tab:red")):
        if p is None:
            continue
        for par, child in topo.bone_order:
            seg = p[[par, child]]
            ax.plot(seg[:, 0], seg[:, 2], -seg[:, 1], color=style)
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_zlabel("y")
    return _save(fig, path)
