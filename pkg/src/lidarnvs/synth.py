"""Synthetic scenes with analytic ray casting, used as ground truth in tests
and for the corridor fixture that mimics a multi-lane capture."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import Frame, Manifest
from .rangeview import BeamTable, Pose, RangeImage, ray_grid

__all__ = [
    "Plane",
    "Box",
    "Cylinder",
    "SyntheticScene",
    "raycast_scan",
    "corridor_fixture",
    "CorridorFixture",
]

_EPS = 1e-9


@dataclass(frozen=True)
class Plane:
    """Infinite plane through ``point`` with unit ``normal``."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    intensity: float

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        p = np.asarray(self.point, dtype=np.float64)
        denom = dirs @ n
        num = (p - origins) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where(np.abs(denom) < _EPS, np.inf, t)
        return np.where(t > _EPS, t, np.inf)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; rays hit the nearest face, from inside or outside."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    intensity: float

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - origins) / dirs
            t1 = (hi - origins) / dirs
        near = np.nanmin(np.stack([t0, t1]), axis=0).max(axis=-1)
        far = np.nanmax(np.stack([t0, t1]), axis=0).min(axis=-1)
        hit = far >= np.maximum(near, 0.0)
        t = np.where(near > _EPS, near, far)  # inside the box -> exit face
        return np.where(hit & (t > _EPS), t, np.inf)


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder (axis parallel to z) spanning [z0, z1], no caps."""

    center: tuple[float, float]
    radius: float
    z0: float
    z1: float
    intensity: float

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        ox = origins[..., 0] - self.center[0]
        oy = origins[..., 1] - self.center[1]
        dx, dy = dirs[..., 0], dirs[..., 1]
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius**2
        disc = b * b - 4.0 * a * c
        ok = (disc >= 0.0) & (a > _EPS)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_near = (-b - sq) / (2.0 * a)
            t_far = (-b + sq) / (2.0 * a)
        best = np.full(ox.shape, np.inf)
        for t in (t_near, t_far):
            z = origins[..., 2] + t * dirs[..., 2]
            good = ok & (t > _EPS) & (z >= self.z0) & (z <= self.z1)
            best = np.where(good & (t < best), t, best)
        return best


@dataclass
class SyntheticScene:
    """A bag of primitives; each ray returns its nearest hit or misses."""

    primitives: list = field(default_factory=list)

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit for each ray. Returns (t, intensity, hit_mask)."""
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        best_t = np.full(dirs.shape[:-1], np.inf)
        best_i = np.zeros(dirs.shape[:-1])
        for prim in self.primitives:
            t = prim.raycast(origins, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_i = np.where(closer, prim.intensity, best_i)
        hit = np.isfinite(best_t)
        return np.where(hit, best_t, 0.0), np.where(hit, best_i, 0.0), hit


def raycast_scan(
    scene: SyntheticScene,
    pose: Pose,
    beams: BeamTable,
    noise_sigma: float = 0.0,
    drop_prob: float = 0.0,
    seed: int = 0,
) -> RangeImage:
    """Render a ground-truth scan at ``pose``, optionally with seeded Gaussian
    depth noise and Bernoulli ray drops."""
    dirs_world = ray_grid(beams) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs_world.shape)
    depth, intensity, hit = scene.raycast(origins, dirs_world)

    rng = np.random.default_rng(seed)
    if noise_sigma > 0.0:
        depth = depth + np.where(hit, rng.normal(0.0, noise_sigma, depth.shape), 0.0)
        depth = np.maximum(depth, 0.0)
    if drop_prob > 0.0:
        dropped = rng.uniform(size=depth.shape) < drop_prob
        hit = hit & ~dropped
        depth = np.where(hit, depth, 0.0)
        intensity = np.where(hit, intensity, 0.0)
    return RangeImage(depth, intensity, hit.astype(np.float64))


def _lane_poses(xs: np.ndarray, y: float, z: float) -> list[Pose]:
    poses = []
    for i, x in enumerate(xs):
        mat = np.eye(4)
        mat[:3, 3] = (x, y, z)
        poses.append(Pose(mat, timestamp=i * 0.1))
    return poses


@dataclass
class CorridorFixture:
    """Closed corridor with occluders, scanned from a center lane and two
    parallel lanes offset +-3.5 m. The side lanes supply extrapolation ground
    truth that single-pass captures lack."""

    scene: SyntheticScene
    beams: BeamTable
    train: Manifest    # center lane, 20 poses
    interp: Manifest   # held-out poses on the center lane
    extrap: Manifest   # held-out poses on the +-3.5 m lanes
    lane_offset: float

    def write(self, out_dir) -> dict:
        from pathlib import Path
        from .formats import save_manifest

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, manifest in (("train", self.train), ("interp", self.interp), ("extrap", self.extrap)):
            target = out_dir / f"{name}.json"
            save_manifest(manifest, target)
            paths[name] = target
        return paths


def corridor_fixture(
    seed: int,
    height: int = 32,
    width: int = 512,
    n_poses: int = 20,
    lane_offset: float = 3.5,
    noise_sigma: float = 0.0,
    drop_prob: float = 0.0,
) -> CorridorFixture:
    """Deterministic corridor world plus train / interpolation / extrapolation
    manifests. Default 32x512 beams are a desk-scale downsample of a 32-beam
    spinning unit."""
    rng = np.random.default_rng(seed)
    sensor_z = 1.6

    scene = SyntheticScene()
    # closed room: rays always return, so ground truth raydrop is all ones
    scene.primitives.append(Box((0.0, -7.0, 0.0), (44.0, 7.0, 4.0), intensity=0.30))
    # crates along the walls: intensity texture plus occlusion shadows
    for i, x in enumerate(np.linspace(4.0, 40.0, 10)):
        side = -1.0 if i % 2 == 0 else 1.0
        w = 0.8 + 0.6 * rng.uniform()
        d = 0.8 + 0.6 * rng.uniform()
        h = 0.8 + 1.4 * rng.uniform()
        yc = side * (5.6 - 0.4 * rng.uniform())
        scene.primitives.append(
            Box((x - w / 2, yc - d / 2, 0.0), (x + w / 2, yc + d / 2, h),
                intensity=float(0.45 + 0.5 * rng.uniform()))
        )
    # pillars flanking the center lane: side lanes see behind them
    for i, x in enumerate(np.linspace(8.0, 36.0, 6)):
        side = -1.0 if i % 2 == 0 else 1.0
        scene.primitives.append(
            Cylinder((float(x), side * 1.7), radius=0.35, z0=0.0, z1=4.0,
                     intensity=float(0.7 + 0.25 * rng.uniform()))
        )

    elevations = np.linspace(-0.38, 0.30, height)
    beams = BeamTable(elevations, width)

    xs_train = np.linspace(7.0, 37.0, n_poses)
    xs_interp = 0.5 * (xs_train[:-1] + xs_train[1:])[::2]
    train_poses = _lane_poses(xs_train, 0.0, sensor_z)
    interp_poses = _lane_poses(xs_interp, 0.0, sensor_z)
    extrap_poses = _lane_poses(xs_train[::2], +lane_offset, sensor_z) + _lane_poses(
        xs_train[::2], -lane_offset, sensor_z
    )

    def scan_all(poses: list[Pose], tag: int) -> Manifest:
        frames = []
        for k, pose in enumerate(poses):
            img = raycast_scan(
                scene, pose, beams,
                noise_sigma=noise_sigma, drop_prob=drop_prob,
                seed=seed * 1000003 + tag * 1009 + k,
            )
            frames.append(Frame(pose=pose, image=img))
        return Manifest(beams=beams, frames=frames)

    return CorridorFixture(
        scene=scene,
        beams=beams,
        train=scan_all(train_poses, 0),
        interp=scan_all(interp_poses, 1),
        extrap=scan_all(extrap_poses, 2),
        lane_offset=lane_offset,
    )
