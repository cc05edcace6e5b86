"""Range-view geometry: converting point clouds to structured range images and back.

A range image is an H x W grid whose rows correspond to laser beams (one
elevation angle per row, highest beam on row 0) and whose columns sweep
azimuth from +pi (column 0) down to -pi (column W-1). Three channels are
stored per pixel: depth in meters (0 encodes no return), intensity in
[0, 1], and a ray-drop value in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BeamTable",
    "RangeImage",
    "Pose",
    "nearest_beam",
    "project_points",
    "pixel_to_ray",
    "unproject",
]


@dataclass(frozen=True)
class BeamTable:
    """Sensor intrinsics: per-beam elevation angles plus azimuth resolution."""

    elevations: np.ndarray  # (H,) radians, strictly increasing
    width: int

    def __post_init__(self):
        elev = np.ascontiguousarray(np.asarray(self.elevations, dtype=np.float64))
        object.__setattr__(self, "elevations", elev)
        if elev.ndim != 1 or elev.size < 2:
            raise ValueError("beam table needs at least two elevations")
        if not np.all(np.isfinite(elev)):
            raise ValueError("beam elevations must be finite")
        if not np.all(np.diff(elev) > 0):
            raise ValueError("beam elevations must be strictly increasing")
        if int(self.width) < 4:
            raise ValueError(f"width must be >= 4, got {self.width}")
        object.__setattr__(self, "width", int(self.width))

    @property
    def height(self) -> int:
        return int(self.elevations.size)

    def row_elevations(self) -> np.ndarray:
        """Elevation of each image row (row 0 is the highest beam)."""
        return self.elevations[::-1].copy()

    def column_azimuths(self) -> np.ndarray:
        """Azimuth of each image column, linear from +pi down to -pi."""
        w = np.arange(self.width, dtype=np.float64)
        return np.pi * (1.0 - 2.0 * w / (self.width - 1))


@dataclass
class RangeImage:
    """Depth / intensity / ray-drop channels on the beam-azimuth grid."""

    depth: np.ndarray      # (H, W) meters, >= 0, 0 where no return
    intensity: np.ndarray  # (H, W) in [0, 1]
    raydrop: np.ndarray    # (H, W) in [0, 1]; ground truth scans use {0, 1}

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        self.raydrop = np.asarray(self.raydrop, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError("channels must be 2-D")
        if self.intensity.shape != self.depth.shape or self.raydrop.shape != self.depth.shape:
            raise ValueError("channel shapes differ")
        for name in ("depth", "intensity", "raydrop"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} channel contains non-finite values")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def copy(self) -> "RangeImage":
        return RangeImage(self.depth.copy(), self.intensity.copy(), self.raydrop.copy())

    @classmethod
    def zeros(cls, height: int, width: int) -> "RangeImage":
        return cls(
            np.zeros((height, width)),
            np.zeros((height, width)),
            np.zeros((height, width)),
        )


@dataclass(frozen=True)
class Pose:
    """Rigid sensor-to-world transform (4x4, row-major) with a timestamp."""

    matrix: np.ndarray  # (4, 4)
    timestamp: float = 0.0

    def __post_init__(self):
        mat = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        object.__setattr__(self, "matrix", mat)
        if mat.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        if not np.all(np.isfinite(mat)):
            raise ValueError("pose matrix must be finite")
        rot = mat[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")
        if not np.allclose(mat[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
            raise ValueError("pose bottom row must be (0, 0, 0, 1)")

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> "Pose":
        return cls(np.eye(4), timestamp)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Sensor-frame points (N, 3) to world frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse_transform_points(self, pts: np.ndarray) -> np.ndarray:
        """World-frame points (N, 3) to sensor frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


def nearest_beam(phi: float, beams: BeamTable) -> tuple[int, float]:
    """Beam index closest to elevation ``phi`` and its position ratio in [0, 1].

    Ties between two equidistant beams resolve to the lower index.
    """
    idx = int(np.argmin(np.abs(beams.elevations - phi)))
    return idx, idx / (beams.height - 1)


def _nearest_beam_indices(phis: np.ndarray, beams: BeamTable) -> np.ndarray:
    """Vectorized nearest-beam lookup with ties toward the lower index."""
    elev = beams.elevations
    hi = np.searchsorted(elev, phis)  # insertion points
    hi = np.clip(hi, 1, elev.size - 1)
    lo = hi - 1
    pick_hi = np.abs(elev[hi] - phis) < np.abs(phis - elev[lo])
    return np.where(pick_hi, hi, lo)


def project_points(points: np.ndarray, beams: BeamTable) -> RangeImage:
    """Project sensor-frame points (N, 4: x, y, z, intensity) to a range image.

    Each point lands on the row of its nearest beam and the column given by
    azimuth, rounded half-away-from-zero and clamped to the grid. When
    several points collide on a pixel the nearest depth wins (ties resolve
    to the smaller input index). Intensities are clamped to [0, 1].
    """
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return RangeImage.zeros(beams.height, beams.width)
    if points.ndim != 2 or points.shape[1] < 4:
        raise ValueError("points must have shape (N, 4): x, y, z, intensity")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")

    xyz = points[:, :3]
    depth = np.linalg.norm(xyz, axis=1)
    if np.any(depth == 0.0):
        raise ValueError("points coincident with the sensor origin are not projectable")

    h_count, w_count = beams.height, beams.width
    phi = np.arcsin(np.clip(xyz[:, 2] / depth, -1.0, 1.0))
    theta = np.arctan2(xyz[:, 1], xyz[:, 0])

    beam_idx = _nearest_beam_indices(phi, beams)
    rows = (h_count - 1) - beam_idx
    cols_f = 0.5 * (1.0 - theta / np.pi) * (w_count - 1)
    # round half away from zero (columns are always >= 0 here), then clamp
    cols = np.clip(np.floor(cols_f + 0.5).astype(np.int64), 0, w_count - 1)

    pix = rows * w_count + cols
    order = np.lexsort((np.arange(points.shape[0]), depth, pix))
    pix_sorted = pix[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = order[first]

    img = RangeImage.zeros(h_count, w_count)
    flat_depth = img.depth.reshape(-1)
    flat_int = img.intensity.reshape(-1)
    flat_drop = img.raydrop.reshape(-1)
    flat_depth[pix[winners]] = depth[winners]
    flat_int[pix[winners]] = np.clip(points[winners, 3], 0.0, 1.0)
    flat_drop[pix[winners]] = 1.0
    return img


def pixel_to_ray(h: int, w: int, beams: BeamTable) -> tuple[float, float, np.ndarray]:
    """Elevation, azimuth, and unit direction of the ray through pixel (h, w)."""
    if not (0 <= h < beams.height and 0 <= w < beams.width):
        raise IndexError(f"pixel ({h}, {w}) outside {beams.height}x{beams.width} grid")
    phi = float(beams.elevations[beams.height - 1 - h])
    theta = float(np.pi * (1.0 - 2.0 * w / (beams.width - 1)))
    direction = np.array(
        [np.cos(theta) * np.cos(phi), np.sin(theta) * np.cos(phi), np.sin(phi)]
    )
    return phi, theta, direction


def ray_grid(beams: BeamTable) -> np.ndarray:
    """Unit ray directions for every pixel, shape (H, W, 3)."""
    phi = beams.row_elevations()[:, None]
    theta = beams.column_azimuths()[None, :]
    return np.stack(
        [
            np.cos(theta) * np.cos(phi),
            np.sin(theta) * np.cos(phi),
            np.broadcast_to(np.sin(phi), (beams.height, beams.width)),
        ],
        axis=-1,
    )


def unproject(img: RangeImage, beams: BeamTable) -> np.ndarray:
    """Lift returned pixels (raydrop >= 0.5, depth > 0) to points (M, 4).

    Points come out in sensor frame, row-major pixel order, with the pixel
    intensity carried along as the fourth column.
    """
    if img.shape != (beams.height, beams.width):
        raise ValueError("range image does not match beam table dimensions")
    mask = (img.raydrop >= 0.5) & (img.depth > 0.0)
    if not np.any(mask):
        return np.zeros((0, 4))
    dirs = ray_grid(beams)[mask]
    depth = img.depth[mask][:, None]
    return np.concatenate([depth * dirs, img.intensity[mask][:, None]], axis=1)
