"""Point-cloud and range-image evaluation metrics, plus the held-out
evaluation driver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree
from torch import Tensor

from .field import DTYPE
from .rangeview import BeamTable, RangeImage, unproject

__all__ = [
    "chamfer",
    "fscore",
    "psnr",
    "ssim",
    "ssim_map",
    "jsd_bev",
    "mmd_bev",
    "bev_histogram",
    "EvalConfig",
    "EvalReport",
    "evaluate",
]

PSNR_CAP_DB = 100.0


def _as_points(cloud: np.ndarray, name: str) -> np.ndarray:
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ValueError(f"{name} must have shape (N, >=3)")
    if pts.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return pts[:, :3]


def chamfer(cloud_a: np.ndarray, cloud_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance (exact, KD-tree accelerated)."""
    a = _as_points(cloud_a, "cloud_a")
    b = _as_points(cloud_b, "cloud_b")
    d_ab = cKDTree(b).query(a, k=1)[0]
    d_ba = cKDTree(a).query(b, k=1)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def fscore(cloud_a: np.ndarray, cloud_b: np.ndarray, threshold: float = 0.1) -> float:
    """Harmonic mean of precision/recall at a distance threshold in meters."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    a = _as_points(cloud_a, "cloud_a")
    b = _as_points(cloud_b, "cloud_b")
    precision = float((cKDTree(b).query(a, k=1)[0] <= threshold).mean())
    recall = float((cKDTree(a).query(b, k=1)[0] <= threshold).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for near-zero MSE."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("psnr inputs must have matching shapes")
    mse = float(np.mean((pred - target) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def _gaussian_window(window: int, sigma: float, dtype: torch.dtype = DTYPE) -> Tensor:
    half = (window - 1) / 2.0
    x = torch.arange(window, dtype=dtype) - half
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img: Tensor, kernel: Tensor) -> Tensor:
    pad = (kernel.numel() - 1) // 2
    x = img[None, None]
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, kernel.view(1, 1, -1, 1))
    x = F.conv2d(x, kernel.view(1, 1, 1, -1))
    return x[0, 0]


def ssim_map(
    x: Tensor,
    y: Tensor,
    window: int = 11,
    sigma: float = 1.5,
    peak: float = 1.0,
) -> Tensor:
    """Per-pixel structural similarity with a Gaussian window (differentiable)."""
    if x.shape != y.shape:
        raise ValueError("ssim inputs must have matching shapes")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    kernel = _gaussian_window(window, sigma, x.dtype)
    mu_x = _blur(x, kernel)
    mu_y = _blur(y, kernel)
    var_x = _blur(x * x, kernel) - mu_x * mu_x
    var_y = _blur(y * y, kernel) - mu_y * mu_y
    cov = _blur(x * y, kernel) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).clamp(-1.0, 1.0)


def ssim(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM over the image (11x11 Gaussian window, sigma 1.5)."""
    x = torch.as_tensor(np.asarray(pred), dtype=DTYPE)
    y = torch.as_tensor(np.asarray(target), dtype=DTYPE)
    return float(ssim_map(x, y, peak=peak).mean())


def bev_histogram(points: np.ndarray, extent: float = 50.0, bins: int = 100) -> np.ndarray:
    """Normalized top-down occupancy histogram over [-extent, extent]^2."""
    pts = _as_points(points, "points")
    hist, _, _ = np.histogram2d(
        pts[:, 0], pts[:, 1], bins=bins,
        range=[[-extent, extent], [-extent, extent]],
    )
    total = hist.sum()
    return hist / total if total > 0 else hist


def jsd_bev(cloud_a: np.ndarray, cloud_b: np.ndarray, extent: float = 50.0, bins: int = 100) -> float:
    """Jensen-Shannon divergence (nats) between BEV occupancy histograms."""
    p = bev_histogram(cloud_a, extent, bins)
    q = bev_histogram(cloud_b, extent, bins)
    m = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def _bev_kernel(extent: float, bins: int) -> tuple[np.ndarray, float]:
    """Per-axis Gaussian kernel matrix; bandwidth is the mean distance over
    all ordered bin-center pairs of the 2-D grid."""
    step = 2.0 * extent / bins
    deltas = np.arange(-(bins - 1), bins) * step
    mult = (bins - np.abs(np.arange(-(bins - 1), bins))).astype(np.float64)
    dist = np.sqrt(deltas[:, None] ** 2 + deltas[None, :] ** 2)
    weight = mult[:, None] * mult[None, :]
    bandwidth = float((dist * weight).sum() / weight.sum())

    centers = (np.arange(bins) + 0.5) * step - extent
    diff = centers[:, None] - centers[None, :]
    kernel = np.exp(-(diff**2) / (2.0 * bandwidth**2))
    return kernel, bandwidth


def mmd_bev(cloud_a: np.ndarray, cloud_b: np.ndarray, extent: float = 50.0, bins: int = 100) -> float:
    """Squared Gaussian-kernel maximum mean discrepancy between BEV
    histograms (separable kernel; bandwidth = mean inter-bin distance)."""
    p = bev_histogram(cloud_a, extent, bins)
    q = bev_histogram(cloud_b, extent, bins)
    k, _ = _bev_kernel(extent, bins)

    def inner(a: np.ndarray, b: np.ndarray) -> float:
        return float((a * (k @ b @ k)).sum())

    return max(inner(p, p) + inner(q, q) - 2.0 * inner(p, q), 0.0)


@dataclass
class EvalConfig:
    fscore_threshold: float = 0.1   # meters
    bev_extent: float = 50.0
    bev_bins: int = 100
    raydrop_threshold: float = 0.5  # return probability -> point export


METRIC_NAMES = ("cd", "fscore", "psnr", "ssim", "jsd", "mmd")


@dataclass
class EvalReport:
    per_frame: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    fscore_threshold: float = 0.1

    def to_dict(self) -> dict:
        return {
            "fscore_threshold": self.fscore_threshold,
            "per_frame": self.per_frame,
            "mean": self.mean,
        }

    def to_table(self) -> str:
        header = f"{'frame':>6} " + " ".join(f"{n:>10}" for n in METRIC_NAMES)
        lines = [header, "-" * len(header)]
        for row in self.per_frame:
            cells = " ".join(f"{row[n]:>10.4f}" for n in METRIC_NAMES)
            lines.append(f"{row['frame']:>6} " + cells)
        cells = " ".join(f"{self.mean[n]:>10.4f}" for n in METRIC_NAMES)
        lines.append(f"{'mean':>6} " + cells)
        lines.append("(mmd in units of 1e-5: multiply by 1e5 to compare tables)")
        return "\n".join(lines)


def evaluate(scene, frames, beams: BeamTable, cfg: EvalConfig | None = None) -> EvalReport:
    """Render each held-out frame and score it against its ground truth."""
    from .rasterizer import render

    cfg = cfg or EvalConfig()
    if hasattr(frames, "frames"):
        frames = frames.frames
    report = EvalReport(fscore_threshold=cfg.fscore_threshold)
    for i, frame in enumerate(frames):
        target = frame.load(beams)
        out = render(scene, frame.pose, beams)
        pred = out.to_range_image()
        pred_export = RangeImage(
            pred.depth, pred.intensity,
            (pred.raydrop >= cfg.raydrop_threshold).astype(np.float64),
        )
        pred_pts = unproject(pred_export, beams)
        tgt_pts = unproject(target, beams)
        row = {
            "frame": i,
            "cd": chamfer(pred_pts, tgt_pts),
            "fscore": fscore(pred_pts, tgt_pts, cfg.fscore_threshold),
            "psnr": psnr(pred.intensity, target.intensity, peak=1.0),
            "ssim": ssim(pred.intensity, target.intensity, peak=1.0),
            "jsd": jsd_bev(pred_pts, tgt_pts, cfg.bev_extent, cfg.bev_bins),
            "mmd": mmd_bev(pred_pts, tgt_pts, cfg.bev_extent, cfg.bev_bins),
        }
        report.per_frame.append(row)
    report.mean = {
        name: float(np.mean([row[name] for row in report.per_frame]))
        for name in METRIC_NAMES
    }
    return report
