import numpy as np
import pytest

from lidarnvs.rangeview import BeamTable, pixel_to_ray


@pytest.fixture
def small_beams() -> BeamTable:
    return BeamTable(np.array([-0.1, 0.0, 0.1]), width=8)


@pytest.fixture
def mid_beams() -> BeamTable:
    return BeamTable(np.linspace(-0.3, 0.2, 16), width=128)


def snapped_cloud(beams: BeamTable, count: int, seed: int,
                  d_lo: float = 2.0, d_hi: float = 40.0) -> np.ndarray:
    """Points lying exactly on beam rays at distinct pixels, returned in
    row-major pixel order (the order unproject emits)."""
    rng = np.random.default_rng(seed)
    n_pix = beams.height * beams.width
    count = min(count, n_pix)
    flat = np.sort(rng.choice(n_pix, size=count, replace=False))
    depths = rng.uniform(d_lo, d_hi, count)
    intens = rng.uniform(0.0, 1.0, count)
    pts = np.zeros((count, 4))
    for i, (pix, d, it) in enumerate(zip(flat, depths, intens)):
        h, w = divmod(int(pix), beams.width)
        _, _, direction = pixel_to_ray(h, w, beams)
        pts[i, :3] = d * direction
        pts[i, 3] = it
    return pts


def random_scene(n_anchors: int, seed: int, config=None, spread: float = 8.0):
    """Small scene with randomized tokens for gradient-rich tests."""
    import torch
    from lidarnvs.field import SceneConfig, init_scene

    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-spread, spread, (max(n_anchors * 2, 16), 3))
    pts[:, 0] += spread * 1.5  # keep anchors in front of the origin-ish
    scene = init_scene(pts, n_anchors, seed, config)
    with torch.no_grad():
        scene.tokens += torch.as_tensor(
            rng.uniform(-0.5, 0.5, scene.tokens.shape), dtype=scene.tokens.dtype
        )
    return scene


def make_attrs(centers, quats=None, scales=None, intensity=None, raydrop=None,
               opacity=None):
    """Hand-built ViewAttributes for rasterizer tests."""
    import torch
    from lidarnvs.field import DTYPE, ViewAttributes

    centers = torch.as_tensor(np.asarray(centers, dtype=np.float64), dtype=DTYPE)
    n = centers.shape[0]

    def fill(value, default, shape):
        if value is None:
            value = default
        arr = torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)
        return arr.expand(shape).clone() if arr.ndim < len(shape) or arr.shape != tuple(shape) else arr

    if quats is None:
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    if scales is None:
        scales = np.tile([0.5, 0.5], (n, 1))
    return ViewAttributes(
        center=centers,
        rotation=torch.as_tensor(np.asarray(quats, dtype=np.float64), dtype=DTYPE),
        scales=torch.as_tensor(np.asarray(scales, dtype=np.float64), dtype=DTYPE),
        intensity=fill(intensity, np.full(n, 0.5), (n,)),
        raydrop=fill(raydrop, np.full(n, 0.8), (n,)),
        opacity=fill(opacity, np.full(n, 0.7), (n,)),
        anchor_ids=torch.arange(n),
    )


def random_attrs(n: int, seed: int, d_lo: float = 3.0, d_hi: float = 25.0):
    """Randomized splats scattered around the sensor, for oracle-equivalence
    style tests."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-np.pi, np.pi, n)
    phi = rng.uniform(-0.35, 0.25, n)
    d = rng.uniform(d_lo, d_hi, n)
    centers = np.stack(
        [d * np.cos(theta) * np.cos(phi), d * np.sin(theta) * np.cos(phi), d * np.sin(phi)],
        axis=1,
    )
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = np.exp(rng.uniform(np.log(0.1), np.log(1.2), (n, 2)))
    return make_attrs(
        centers,
        quats=quats,
        scales=scales,
        intensity=rng.uniform(0.05, 0.95, n),
        raydrop=rng.uniform(0.05, 0.95, n),
        opacity=rng.uniform(0.1, 0.95, n),
    )
