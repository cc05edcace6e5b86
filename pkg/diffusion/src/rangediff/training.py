"""Training on (degraded condition, real scan) pairs produced by the
reconstruction engine's `pairs` command."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .encoding import fourier_pe, normalize_scan
from .model import ConditionalDenoiser, build_model
from .rvim import read_rvim
from .schedule import DiffusionConfig, Schedule, q_sample


@dataclass
class PairCorpus:
    conditions: list  # (3, H, W) float arrays
    targets: list
    poses: list
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.conditions)

    @classmethod
    def load(cls, pairs_dir) -> "PairCorpus":
        pairs_dir = Path(pairs_dir)
        index = json.loads((pairs_dir / "pairs.json").read_text())
        conditions, targets, poses = [], [], []
        for entry in index["pairs"]:
            conditions.append(read_rvim(pairs_dir / entry["condition"]))
            targets.append(read_rvim(pairs_dir / entry["target"]))
            poses.append(entry["pose"])
        if not conditions:
            raise ValueError(f"{pairs_dir}: empty pair corpus")
        h, w = conditions[0].shape[1:]
        return cls(conditions, targets, poses, h, w)


def epsilon_loss(pred: Tensor, eps: Tensor) -> Tensor:
    """Per-pixel squared noise-prediction error summed over channels, then
    averaged; unit-variance noise and a zero model give ~channel-count."""
    if pred.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(eps.shape)}")
    return ((pred - eps) ** 2).sum(dim=1).mean()


def train_step(
    batch: tuple[Tensor, Tensor],
    model: ConditionalDenoiser,
    schedule: Schedule,
    optimizer: torch.optim.Optimizer | None = None,
    generator: torch.Generator | None = None,
    pe: Tensor | None = None,
) -> float:
    """One noise-prediction step on a batch of normalized (condition, target)
    tensors, shape (B, 3, H, W) each. Applies a gradient step when an
    optimizer is supplied."""
    cond, z0 = batch
    bsz = z0.shape[0]
    if pe is None:
        pe = fourier_pe(z0.shape[2], z0.shape[3], model.cfg.pe_frequencies)
    t = torch.randint(0, len(schedule), (bsz,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator)
    z_t = q_sample(z0, t.numpy(), eps, schedule)
    inp = torch.cat([z_t, cond, pe[None].expand(bsz, -1, -1, -1)], dim=1)
    pred = model(inp, t)
    loss = epsilon_loss(pred, eps)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def train(
    corpus: PairCorpus,
    cfg: DiffusionConfig,
    steps: int,
    seed: int = 0,
    batch_size: int = 2,
    log_every: int = 50,
    log=None,
) -> tuple[ConditionalDenoiser, Schedule, list[float]]:
    """Train a fresh denoiser on the corpus; returns per-step losses."""
    model = build_model(cfg, seed)
    schedule = Schedule.cosine(cfg.timesteps)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed)

    cond_all = torch.stack([normalize_scan(c, cfg.max_depth) for c in corpus.conditions])
    tgt_all = torch.stack([normalize_scan(t, cfg.max_depth) for t in corpus.targets])
    pe = fourier_pe(corpus.height, corpus.width, cfg.pe_frequencies)

    losses = []
    for step in range(steps):
        idx = torch.randint(0, len(corpus), (batch_size,), generator=gen)
        loss = train_step(
            (cond_all[idx], tgt_all[idx]), model, schedule, optimizer, gen, pe
        )
        losses.append(loss)
        if log is not None and (step + 1) % log_every == 0:
            recent = sum(losses[-log_every:]) / log_every
            log(f"step {step + 1}/{steps} loss {recent:.4f}")
    return model, schedule, losses


def save_model(path, model: ConditionalDenoiser, cfg: DiffusionConfig) -> None:
    torch.save({"config": cfg.__dict__, "state": model.state_dict()}, path)


def load_model(path) -> tuple[ConditionalDenoiser, Schedule, DiffusionConfig]:
    payload = torch.load(path, weights_only=False)
    raw = dict(payload["config"])
    raw["widths"] = tuple(raw["widths"])
    cfg = DiffusionConfig(**raw)
    model = build_model(cfg, 0)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, Schedule.cosine(cfg.timesteps), cfg
