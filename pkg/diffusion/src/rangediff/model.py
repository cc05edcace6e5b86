"""Toy conditional U-Net denoiser: three resolutions, timestep embedding,
Haar-wavelet down/up sampling, Fourier-encoded pixel coordinates appended to
the channel-concatenated (noised target, condition) input."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .schedule import DiffusionConfig
from .wavelet import haar_down, haar_up


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        groups = max(1, min(8, channels // 4))
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class Down(nn.Module):
    """2x downsampling; a Haar transform feeds a 1x1 mix when enabled."""

    def __init__(self, c_in: int, c_out: int, wavelet: bool):
        super().__init__()
        self.wavelet = wavelet
        if wavelet:
            self.mix = nn.Conv2d(4 * c_in, c_out, 1)
        else:
            self.mix = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.mix(haar_down(x)) if self.wavelet else self.mix(x)


class Up(nn.Module):
    """2x upsampling; a 1x1 expansion feeds the inverse Haar when enabled."""

    def __init__(self, c_in: int, c_out: int, wavelet: bool):
        super().__init__()
        self.wavelet = wavelet
        if wavelet:
            self.mix = nn.Conv2d(c_in, 4 * c_out, 1)
        else:
            self.mix = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        if self.wavelet:
            return haar_up(self.mix(x))
        return self.mix(torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class ConditionalDenoiser(nn.Module):
    """Predicts the injected noise from (z_t, condition, positional encoding)."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        in_ch = 6 + 4 * cfg.pe_frequencies  # target 3 + condition 3 + PE
        t_dim = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim)
        )
        self.in_conv = nn.Conv2d(in_ch, w0, 3, padding=1)
        self.enc0 = ResBlock(w0, t_dim)
        self.down0 = Down(w0, w1, cfg.use_wavelet)
        self.enc1 = ResBlock(w1, t_dim)
        self.down1 = Down(w1, w2, cfg.use_wavelet)
        self.mid = ResBlock(w2, t_dim)
        self.up1 = Up(w2, w1, cfg.use_wavelet)
        self.fuse1 = nn.Conv2d(2 * w1, w1, 1)
        self.dec1 = ResBlock(w1, t_dim)
        self.up0 = Up(w1, w0, cfg.use_wavelet)
        self.fuse0 = nn.Conv2d(2 * w0, w0, 1)
        self.dec0 = ResBlock(w0, t_dim)
        self.out_norm = nn.GroupNorm(max(1, min(8, w0 // 4)), w0)
        self.out_conv = nn.Conv2d(w0, 3, 3, padding=1)

    def forward(self, x: Tensor, t: Tensor) -> Tensor:
        t_emb = self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim))
        h0 = self.enc0(self.in_conv(x), t_emb)
        h1 = self.enc1(self.down0(h0), t_emb)
        h2 = self.mid(self.down1(h1), t_emb)
        u1 = self.dec1(self.fuse1(torch.cat([self.up1(h2), h1], dim=1)), t_emb)
        u0 = self.dec0(self.fuse0(torch.cat([self.up0(u1), h0], dim=1)), t_emb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(u0)))


def build_model(cfg: DiffusionConfig, seed: int = 0) -> ConditionalDenoiser:
    torch.manual_seed(seed)
    return ConditionalDenoiser(cfg)
