"""Orthonormal Haar transform used by the down/up sampling layers."""

from __future__ import annotations

import torch
from torch import Tensor


def haar_down(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, 4C, H/2, W/2); subbands stacked as LL, LH, HL, HH."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError("spatial dims must be even for the Haar transform")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a - b + c - d) * 0.5
    hl = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return torch.cat([ll, lh, hl, hh], dim=1)


def haar_up(x: Tensor) -> Tensor:
    """Inverse of haar_down: (B, 4C, H, W) -> (B, C, 2H, 2W)."""
    if x.shape[1] % 4:
        raise ValueError("channel count must be divisible by 4")
    c4 = x.shape[1] // 4
    ll, lh, hl, hh = x[:, :c4], x[:, c4:2 * c4], x[:, 2 * c4:3 * c4], x[:, 3 * c4:]
    a = (ll + lh + hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    c = (ll + lh - hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    out = x.new_zeros(x.shape[0], c4, x.shape[2] * 2, x.shape[3] * 2)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out
