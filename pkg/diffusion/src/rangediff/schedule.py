"""Cosine noise schedule, forward diffusion, and DDIM stepping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    sampler_steps: int = 50
    base_width: int = 32
    widths: tuple = (32, 48, 64)   # three resolutions
    pe_frequencies: int = 4
    use_wavelet: bool = True
    time_embed_dim: int = 64
    max_depth: float = 60.0        # meters, log-depth normalization ceiling
    learning_rate: float = 2e-4


class Schedule:
    """Holds the cumulative signal fractions alpha_bar[t] for t in [0, T)."""

    def __init__(self, alpha_bar: np.ndarray):
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar.ndim != 1 or alpha_bar.size < 2:
            raise ValueError("schedule needs at least two steps")
        if np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not (0.999 <= alpha_bar[0] <= 1.0):
            raise ValueError("alpha_bar[0] must be ~1")
        self.alpha_bar = alpha_bar

    def __len__(self) -> int:
        return int(self.alpha_bar.size)

    @classmethod
    def cosine(cls, timesteps: int = 1000, s: float = 0.008) -> "Schedule":
        t = np.arange(timesteps, dtype=np.float64) / timesteps
        f = np.cos((t + s) / (1.0 + s) * np.pi / 2.0) ** 2
        return cls(f / f[0])  # alpha_bar[0] == 1 exactly

    def gather(self, t, dtype=torch.float32) -> Tensor:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= len(self)):
            raise IndexError(f"timestep out of range [0, {len(self)})")
        return torch.as_tensor(self.alpha_bar[t], dtype=dtype)


def q_sample(z0: Tensor, t, epsilon: Tensor, schedule: Schedule) -> Tensor:
    """Closed-form forward diffusion: sqrt(ab)*z0 + sqrt(1-ab)*eps."""
    ab = schedule.gather(t, dtype=z0.dtype)
    while ab.ndim < z0.ndim:
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * epsilon


def ddim_step(z_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, schedule: Schedule) -> Tensor:
    """One deterministic (eta=0) DDIM update from t to t_prev (t_prev < t)."""
    ab_t = float(schedule.alpha_bar[t])
    ab_p = float(schedule.alpha_bar[t_prev]) if t_prev >= 0 else 1.0
    pred_z0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * pred_z0 + np.sqrt(1.0 - ab_p) * eps_hat


def sampling_timesteps(timesteps: int, steps: int) -> list[int]:
    """Descending subsequence of timesteps visited by the sampler."""
    ts = np.unique(np.linspace(0, timesteps - 1, steps).round().astype(int))
    return ts[::-1].tolist()
