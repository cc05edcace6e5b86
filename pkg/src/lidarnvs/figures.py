"""Matplotlib report rendering: loss curves, range-image panels, per-frame
metric charts, and BEV overlays, written to files next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_NAMES, EvalReport
from .rangeview import RangeImage

__all__ = [
    "save_loss_curves",
    "save_range_panel",
    "save_metric_chart",
    "save_bev_overlay",
    "save_mask_image",
]

plt.rcParams.update(
    {
        "figure.dpi": 110,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
    }
)


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def save_loss_curves(log: list[dict], path) -> Path:
    """Total and per-term training losses on a log scale."""
    fig, ax = plt.subplots(figsize=(7, 4))
    iters = [row["iteration"] for row in log]
    for key in ("total", "depth", "intensity", "raydrop", "scale"):
        ax.plot(iters, [max(row[key], 1e-12) for row in log], label=key, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(ncol=5, fontsize=8)
    return _finish(fig, path)


def save_range_panel(pred: RangeImage, path, target: RangeImage | None = None, title: str = "") -> Path:
    """Depth / intensity / ray-drop rows; adds target and depth-error rows
    when ground truth is supplied."""
    rows = [("depth", pred.depth, "turbo"), ("intensity", pred.intensity, "gray"),
            ("raydrop", pred.raydrop, "viridis")]
    if target is not None:
        rows.append(("target depth", target.depth, "turbo"))
        rows.append(("|depth error|", np.abs(pred.depth - target.depth), "magma"))
    fig, axes = plt.subplots(len(rows), 1, figsize=(10, 1.3 * len(rows)))
    axes = np.atleast_1d(axes)
    for ax, (name, img, cmap) in zip(axes, rows):
        im = ax.imshow(img, aspect="auto", cmap=cmap, interpolation="nearest")
        ax.set_ylabel(name, fontsize=7)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.grid(False)
        fig.colorbar(im, ax=ax, fraction=0.025, pad=0.01)
    if title:
        axes[0].set_title(title, fontsize=9)
    return _finish(fig, path)


def save_metric_chart(report: EvalReport, path) -> Path:
    """Per-frame metric traces with the aggregate mean marked."""
    fig, axes = plt.subplots(2, 3, figsize=(11, 5))
    frames = [row["frame"] for row in report.per_frame]
    for ax, name in zip(axes.ravel(), METRIC_NAMES):
        vals = [row[name] for row in report.per_frame]
        ax.plot(frames, vals, marker="o", ms=3, lw=1)
        ax.axhline(report.mean[name], color="tab:red", lw=1, ls="--")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("frame")
    fig.tight_layout()
    return _finish(fig, path)


def save_bev_overlay(pred_points: np.ndarray, target_points: np.ndarray, path, extent: float = 50.0) -> Path:
    """Top-down scatter of prediction vs ground truth."""
    fig, ax = plt.subplots(figsize=(6, 6))
    if target_points.size:
        ax.scatter(target_points[:, 0], target_points[:, 1], s=0.3, c="0.6", label="target")
    if pred_points.size:
        ax.scatter(pred_points[:, 0], pred_points[:, 1], s=0.3, c="tab:blue", label="prediction")
    ax.set_xlim(-extent, extent)
    ax.set_ylim(-extent, extent)
    ax.set_aspect("equal")
    ax.legend(markerscale=20, fontsize=8)
    return _finish(fig, path)


def save_mask_image(mask: np.ndarray, path, title: str = "distortion mask") -> Path:
    fig, ax = plt.subplots(figsize=(10, 1.6))
    ax.imshow(mask.astype(float), aspect="auto", cmap="Reds", interpolation="nearest",
              vmin=0.0, vmax=1.0)
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.grid(False)
    return _finish(fig, path)
