"""View expansion: degraded/clean training pairs, extrapolated poses,
generated-scan providers, and distortion-masked expansive reconstruction."""

from __future__ import annotations

import json
import logging
import os
import time
import uuid
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .field import Scene, decode_attributes, perturbed_decode
from .formats import Manifest, read_rvim, write_rvim
from .rangeview import BeamTable, Pose, RangeImage
from .rasterizer import distortion_mask, median_scale_delta, render, render_attributes
from .training import DistortionMask, LossConfig, adam_step, backward

__all__ = [
    "TrainingPair",
    "GeneratedScan",
    "ScanProvider",
    "PassthroughProvider",
    "OracleProvider",
    "NoisyOracleProvider",
    "ExternalSpoolProvider",
    "make_training_pairs",
    "extrapolate_poses",
    "generate_scans",
    "expand_reconstruct",
]

log = logging.getLogger(__name__)

SPOOL_TIMEOUT_ENV = "LIDARNVS_SPOOL_TIMEOUT"
DEFAULT_SPOOL_TIMEOUT = 300.0


@dataclass
class TrainingPair:
    """Degraded rendering (condition) paired with the real scan at one pose."""

    condition: RangeImage
    target: RangeImage
    pose: Pose


@dataclass
class GeneratedScan:
    image: RangeImage
    pose: Pose
    source: str  # oracle | passthrough | external | ...


class ScanProvider(ABC):
    """Source of generated scans conditioned on a coarse extrapolated render."""

    name = "abstract"

    @abstractmethod
    def generate(self, condition: RangeImage, pose: Pose) -> RangeImage:
        ...


class PassthroughProvider(ScanProvider):
    """Returns the condition unchanged (the no-generator ablation)."""

    name = "passthrough"

    def generate(self, condition: RangeImage, pose: Pose) -> RangeImage:
        return condition.copy()


class OracleProvider(ScanProvider):
    """Answers with ground-truth synthetic scans; the test-suite generator."""

    name = "oracle"

    def __init__(self, scene, beams: BeamTable):
        self.scene = scene
        self.beams = beams

    def generate(self, condition: RangeImage, pose: Pose) -> RangeImage:
        from .synth import raycast_scan

        img = raycast_scan(self.scene, pose, self.beams)
        if img.shape != condition.shape:
            raise ValueError("oracle scan dimensions do not match the condition")
        return img


class NoisyOracleProvider(OracleProvider):
    """Oracle plus seeded, spatially smooth depth noise: a stand-in for an
    imperfect generator whose errors are structured rather than white."""

    name = "noisy_oracle"

    def __init__(self, scene, beams: BeamTable, sigma: float = 0.1, seed: int = 0):
        super().__init__(scene, beams)
        self.sigma = sigma
        self.seed = seed
        self._calls = 0

    def generate(self, condition: RangeImage, pose: Pose) -> RangeImage:
        img = super().generate(condition, pose)
        rng = np.random.default_rng((self.seed, self._calls))
        self._calls += 1
        h, w = img.shape
        coarse = rng.normal(0.0, self.sigma, (h // 8 + 2, w // 16 + 2))
        rr = np.linspace(0, coarse.shape[0] - 1, h)
        cc = np.linspace(0, coarse.shape[1] - 1, w)
        r0 = np.floor(rr).astype(int)
        c0 = np.floor(cc).astype(int)
        fr = (rr - r0)[:, None]
        fc = (cc - c0)[None, :]
        r1 = np.minimum(r0 + 1, coarse.shape[0] - 1)
        c1 = np.minimum(c0 + 1, coarse.shape[1] - 1)
        field = (
            coarse[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
            + coarse[np.ix_(r1, c0)] * fr * (1 - fc)
            + coarse[np.ix_(r0, c1)] * (1 - fr) * fc
            + coarse[np.ix_(r1, c1)] * fr * fc
        )
        returns = img.raydrop >= 0.5
        depth = np.where(returns, np.maximum(img.depth + field, 0.05), img.depth)
        return RangeImage(depth, img.intensity, img.raydrop)


class ManifestOracleProvider(ScanProvider):
    """Looks generated scans up in a ground-truth manifest by exact pose;
    how the CLI's oracle mode serves datasets that ship extrapolated truth."""

    name = "oracle"

    def __init__(self, manifest: Manifest):
        self.manifest = manifest

    def generate(self, condition: RangeImage, pose: Pose) -> RangeImage:
        for frame in self.manifest.frames:
            if np.allclose(frame.pose.matrix, pose.matrix, atol=1e-9):
                img = frame.load(self.manifest.beams)
                if img.shape != condition.shape:
                    raise ValueError("oracle scan dimensions do not match the condition")
                return img
        raise KeyError(f"no ground-truth scan at pose translation {pose.translation}")


class ExternalSpoolProvider(ScanProvider):
    """File-based provider: writes ``jobs/<id>.json`` tickets referencing a
    condition RVIM, then polls ``out/<id>.rvim`` (or ``out/<id>.err``)."""

    name = "external"

    def __init__(self, spool_dir, beams: BeamTable, timeout: float | None = None):
        self.spool = Path(spool_dir)
        self.beams = beams
        if timeout is None:
            timeout = float(os.environ.get(SPOOL_TIMEOUT_ENV, DEFAULT_SPOOL_TIMEOUT))
        self.timeout = timeout
        for sub in ("jobs", "conditions", "out"):
            (self.spool / sub).mkdir(parents=True, exist_ok=True)

    def generate(self, condition: RangeImage, pose: Pose) -> RangeImage:
        job_id = uuid.uuid4().hex
        cond_path = self.spool / "conditions" / f"{job_id}.rvim"
        write_rvim(cond_path, condition)
        ticket = {
            "condition_path": str(cond_path),
            "pose": [float(v) for v in pose.matrix.reshape(-1)],
            "beams": {
                "elevations": [float(v) for v in self.beams.elevations],
                "width": self.beams.width,
            },
        }
        job_path = self.spool / "jobs" / f"{job_id}.json"
        tmp = job_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(ticket))
        tmp.rename(job_path)

        out_path = self.spool / "out" / f"{job_id}.rvim"
        err_path = self.spool / "out" / f"{job_id}.err"
        deadline = time.monotonic() + self.timeout
        while time.monotonic() < deadline:
            if out_path.exists():
                return read_rvim(out_path)
            if err_path.exists():
                raise RuntimeError(f"spool job {job_id} failed: {err_path.read_text()}")
            time.sleep(0.2)
        raise TimeoutError(f"spool job {job_id} timed out after {self.timeout:.0f} s")


def make_training_pairs(
    scene: Scene,
    manifest: Manifest,
    sigma: float,
    tau: float,
    seed: int,
    out_dir=None,
) -> list[TrainingPair]:
    """One pair per frame: the condition is a perturbed re-render at the
    frame's own pose (input noise std ``sigma``, dropout ratio ``tau``,
    seeded per frame), the target is the real scan. Optionally written to
    ``out_dir`` as RVIM files plus a ``pairs.json`` index."""
    beams = manifest.beams
    pairs = []
    for i, frame in enumerate(manifest.frames):
        attrs = perturbed_decode(scene, frame.pose, sigma, tau, seed ^ i)
        out = render_attributes(
            attrs, frame.pose, beams, min_distance=scene.config.min_distance
        )
        pairs.append(
            TrainingPair(
                condition=out.to_range_image(),
                target=frame.load(beams),
                pose=frame.pose,
            )
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, pair in enumerate(pairs):
            cond = f"cond_{i:04d}.rvim"
            tgt = f"target_{i:04d}.rvim"
            write_rvim(out_dir / cond, pair.condition)
            write_rvim(out_dir / tgt, pair.target)
            entries.append(
                {
                    "pose": [float(v) for v in pair.pose.matrix.reshape(-1)],
                    "condition": cond,
                    "target": tgt,
                }
            )
        index = {
            "beams": [float(v) for v in beams.elevations],
            "width": beams.width,
            "sigma": sigma,
            "tau": tau,
            "pairs": entries,
        }
        (out_dir / "pairs.json").write_text(json.dumps(index, indent=2))
    return pairs


def extrapolate_poses(
    manifest: Manifest, lateral_offsets=(-3.5, 3.5)
) -> list[Pose]:
    """Each frame's pose shifted along its sensor-frame +y (left) axis by
    every offset in meters."""
    poses = []
    for frame in manifest.frames:
        for off in lateral_offsets:
            mat = frame.pose.matrix.copy()
            mat[:3, 3] = mat[:3, 3] + mat[:3, :3] @ np.array([0.0, off, 0.0])
            poses.append(Pose(mat, frame.pose.timestamp))
    return poses


def generate_scans(
    scene: Scene,
    poses: list[Pose],
    provider: ScanProvider,
    beams: BeamTable,
) -> list[GeneratedScan]:
    """Render a clean condition at each pose and ask the provider for the
    corresponding scan. Failed poses are skipped with a warning; dimension
    mismatches are errors."""
    scans = []
    for pose in poses:
        condition = render(scene, pose, beams).to_range_image()
        try:
            image = provider.generate(condition, pose)
        except Exception as exc:  # provider failure: skip the pose, keep going
            log.warning("provider %s failed at pose %s: %s", provider.name, pose.translation, exc)
            continue
        if image.shape != condition.shape:
            raise ValueError(
                f"provider returned {image.shape}, expected {condition.shape}"
            )
        scans.append(GeneratedScan(image=image, pose=pose, source=provider.name))
    return scans


def expand_reconstruct(
    scene: Scene,
    manifest: Manifest,
    generated: list[GeneratedScan],
    cfg: LossConfig,
    seed: int,
    iters: int | None = None,
) -> Scene:
    """Expansive reconstruction: alternate strictly 1:1 between real frames
    (full loss) and generated scans (loss gated by the depth-distortion mask).

    The mask threshold is the median max-axis scale of the single-pass scene,
    computed once up front and frozen; densification stays off.
    """
    beams = manifest.beams
    if len(manifest.frames) == 0:
        raise ValueError("manifest has no frames")
    images = [f.load(beams) for f in manifest.frames]
    poses = [f.pose for f in manifest.frames]

    ref_pose = poses[len(poses) // 2]
    with torch.no_grad():
        delta = median_scale_delta(decode_attributes(scene, ref_pose))

    rng = np.random.default_rng(seed)
    total = cfg.expand_iters if iters is None else iters
    for it in range(total):
        use_generated = generated and it % 2 == 1
        if use_generated:
            pick = generated[int(rng.integers(len(generated)))]
            with torch.no_grad():
                mask = distortion_mask(render(scene, pick.pose, beams), delta)
            grads = backward(scene, pick.pose, beams, pick.image, cfg, mask=mask)
        else:
            k = int(rng.integers(len(poses)))
            grads = backward(scene, poses[k], beams, images[k], cfg)
        adam_step(scene, grads, cfg, it)
    return scene
