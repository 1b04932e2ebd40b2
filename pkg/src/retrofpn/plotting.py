"""Figures written next to the metrics and prediction files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 120,
}

CLASS_COLORS = ["#8c8c8c", "#e6c229", "#1b998b", "#c5283d", "#5d4ea0", "#f17105", "#2e86ab"]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(records: list[dict], path) -> Path:
    """Per-level training loss (log scale) and train mIoU against epoch."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_iou) = plt.subplots(1, 2, figsize=(8, 3))
        epochs = [r["epoch"] for r in records]
        losses = np.array([r["per_level_loss"] for r in records], dtype=float)
        for lvl in range(losses.shape[1] if losses.ndim == 2 else 0):
            col = losses[:, lvl]
            if np.isfinite(col).any():
                ax_loss.plot(epochs, col, label=f"level {lvl + 1}")
        ax_loss.set_yscale("log")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("cross-entropy")
        ax_loss.legend()
        ax_iou.plot(epochs, [r["miou"] for r in records], color="k")
        ax_iou.set_xlabel("epoch")
        ax_iou.set_ylabel("train mIoU")
        ax_iou.set_ylim(0, 1)
        return _save(fig, path)


def plot_class_iou(iou, class_names: list[str], path, title: str = "") -> Path:
    iou = np.asarray(iou, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        shown = np.nan_to_num(iou, nan=0.0)
        ax.bar(range(len(iou)), shown, color=CLASS_COLORS[: len(iou)])
        ax.set_xticks(range(len(iou)))
        ax.set_xticklabels(class_names[: len(iou)], rotation=30, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("IoU")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_level_predictions(levels: list[tuple[np.ndarray, np.ndarray]], path) -> Path:
    """Top-down scatter of predicted labels, one panel per pyramid level."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(levels), figsize=(3 * len(levels), 3), squeeze=False)
        for lvl, (ax, (coords, labels)) in enumerate(zip(axes[0], levels), start=1):
            colors = np.array(CLASS_COLORS)[np.asarray(labels) % len(CLASS_COLORS)]
            ax.scatter(coords[:, 0], coords[:, 1], s=2, c=colors, linewidths=0)
            ax.set_aspect("equal")
            ax.set_title(f"level {lvl} ({len(coords)} pts)")
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)


def plot_ablation(results: dict[str, list[float]], path) -> Path:
    """Mean test mIoU per ablation variant with per-seed points."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        names = list(results)
        for i, name in enumerate(names):
            vals = np.asarray(results[name]) * 100
            ax.bar(i, vals.mean(), color="#bbbbbb")
            ax.plot([i] * len(vals), vals, "k.", ms=4)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("test mIoU (%)")
        return _save(fig, path)
