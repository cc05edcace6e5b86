"""Fourier positional encoding over normalized image coordinates and channel
normalization between range images and model space."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor


def fourier_pe(height: int, width: int, frequencies: int) -> Tensor:
    """(4*frequencies, H, W) sin/cos features of the normalized row and
    column coordinates. Deterministic; the same pixel of the same grid always
    maps to the same encoding."""
    rows = torch.arange(height, dtype=torch.float32) / max(height - 1, 1)
    cols = torch.arange(width, dtype=torch.float32) / max(width - 1, 1)
    grid_r = rows[:, None].expand(height, width)
    grid_c = cols[None, :].expand(height, width)
    feats = []
    for k in range(frequencies):
        freq = (2.0**k) * np.pi
        feats.extend(
            [
                torch.sin(freq * grid_r), torch.cos(freq * grid_r),
                torch.sin(freq * grid_c), torch.cos(freq * grid_c),
            ]
        )
    return torch.stack(feats, dim=0)


def normalize_scan(planes: np.ndarray, max_depth: float) -> Tensor:
    """Range image planes (3, H, W) to model space in [-1, 1].

    Depth maps through log1p so close structure keeps resolution; no-return
    pixels (depth 0) land exactly at -1.
    """
    depth = np.clip(planes[0], 0.0, max_depth)
    d = 2.0 * np.log1p(depth) / np.log1p(max_depth) - 1.0
    i = 2.0 * np.clip(planes[1], 0.0, 1.0) - 1.0
    r = 2.0 * np.clip(planes[2], 0.0, 1.0) - 1.0
    return torch.as_tensor(np.stack([d, i, r]), dtype=torch.float32)


def denormalize_scan(z: Tensor, max_depth: float) -> np.ndarray:
    """Model space back to range image planes, clamped to valid ranges."""
    z = z.detach().numpy().astype(np.float64)
    depth = np.expm1(np.clip((z[0] + 1.0) / 2.0, 0.0, 1.0) * np.log1p(max_depth))
    intensity = np.clip((z[1] + 1.0) / 2.0, 0.0, 1.0)
    raydrop = np.clip((z[2] + 1.0) / 2.0, 0.0, 1.0)
    return np.stack([depth, intensity, raydrop]).astype(np.float32)
