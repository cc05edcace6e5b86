"""Differentiable range-view rasterization of 2D Gaussian splats.

Rays are intersected exactly with each splat's tangent plane (no screen-space
approximation), then composited front to back. The tiled path bins splats to
16x16 pixel tiles by a conservative angular bounding box; a brute-force path
that tests every splat against every pixel serves as the correctness oracle.
Both paths share the same per-pair math and global ordering, so they agree to
floating-point roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .field import DTYPE, ViewAttributes
from .rangeview import BeamTable, Pose, RangeImage

__all__ = [
    "SplatFrame",
    "RenderOutput",
    "DistortionMask",
    "build_splat_frames",
    "ray_splat_intersect",
    "composite",
    "render",
    "render_attributes",
    "render_bruteforce",
    "median_scale_delta",
    "distortion_mask",
]

TILE = 16
SKIP_WEIGHT = 1.0 / 255.0   # contributions below this opacity*falloff are skipped
STOP_TRANSMITTANCE = 1e-4   # traversal stops once T falls below this
MEDIAN_TRANSMITTANCE = 0.5
DET_EPS = 1e-9
FOOTPRINT_SIGMA = 3.0       # reported angular footprint extent


@dataclass
class SplatFrame:
    """Per-splat geometry in the sensor frame for one pose."""

    center: Tensor      # (M, 3) sensor frame
    basis_u: Tensor     # (M, 3) first tangent axis scaled by s_u
    basis_v: Tensor     # (M, 3) second tangent axis scaled by s_v
    scales: Tensor      # (M, 2)
    intensity: Tensor   # (M,)
    raydrop: Tensor     # (M,)
    opacity: Tensor     # (M,)
    center_dist: Tensor   # (M,) distance of the center from the sensor
    center_phi: Tensor    # (M,) center elevation (screen-gradient hook)
    center_theta: Tensor  # (M,) center azimuth (screen-gradient hook)
    half_angle: Tensor    # (M,) 3-sigma angular footprint, atan(3*max_scale/d)
    attr_rows: Tensor     # (M,) long, rows of the source ViewAttributes

    def __len__(self) -> int:
        return int(self.center.shape[0])

    def transform(self) -> Tensor:
        """Homogeneous 4x3 local-frame transforms: columns are the scaled
        tangent axes and the center, bottom row (0, 0, 1)."""
        m = len(self)
        top = torch.stack([self.basis_u, self.basis_v, self.center], dim=2)  # (M, 3, 3)
        bottom = torch.zeros(m, 1, 3, dtype=self.center.dtype)
        bottom[:, 0, 2] = 1.0
        return torch.cat([top, bottom], dim=1)


@dataclass
class RenderOutput:
    """Rendered channels plus the per-pixel statistics used downstream."""

    intensity: Tensor       # (H, W)
    depth: Tensor           # (H, W) expected depth along each ray
    raydrop: Tensor         # (H, W) return probability
    median_depth: Tensor    # (H, W) depth where T first falls to <= 0.5; 0 if never
    transmittance: Tensor   # (H, W) final T; 1 where nothing was hit
    accumulation: Tensor    # (H, W) sum of compositing weights = 1 - T
    attributes: ViewAttributes | None = None
    frame: SplatFrame | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.depth.shape)

    def to_range_image(self) -> RangeImage:
        return RangeImage(
            self.depth.detach().numpy().copy(),
            self.intensity.detach().numpy().copy(),
            self.raydrop.detach().numpy().copy(),
        )


@dataclass
class DistortionMask:
    """Pixels whose median and expected depth disagree by more than delta."""

    mask: np.ndarray  # (H, W) bool
    delta: float


def _quat_tangent_axes(quat: Tensor) -> tuple[Tensor, Tensor]:
    """First two columns of the rotation matrix of unit quaternions (w,x,y,z)."""
    w, x, y, z = quat.unbind(dim=1)
    t_u = torch.stack(
        [1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], dim=1
    )
    t_v = torch.stack(
        [2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], dim=1
    )
    return t_u, t_v


def build_splat_frames(
    attrs: ViewAttributes,
    pose: Pose,
    min_distance: float = 0.5,
    track_screen_grad: bool = False,
) -> SplatFrame:
    """Assemble sensor-frame splat transforms, culling degenerate quaternions
    (norm < 1e-8) and splats closer to the sensor than ``min_distance``.

    The center is re-expressed through its spherical angles so that gradients
    with respect to the on-image position of each splat can be read off the
    angle tensors after a backward pass.
    """
    dtype = attrs.center.dtype
    rot = torch.as_tensor(pose.rotation, dtype=dtype)
    center_s = (attrs.center - torch.as_tensor(pose.translation, dtype=dtype)) @ rot

    quat_norm = torch.linalg.norm(attrs.rotation, dim=1)
    dist_all = torch.linalg.norm(center_s, dim=1)
    xy_norm = torch.linalg.norm(center_s[:, :2], dim=1)
    keep = (quat_norm >= 1e-8) & (dist_all >= min_distance) & (xy_norm >= 1e-9)
    rows = torch.nonzero(keep, as_tuple=False).squeeze(1)

    c = center_s[rows]
    quat = attrs.rotation[rows] / quat_norm[rows, None]
    t_u, t_v = _quat_tangent_axes(quat)
    t_u = t_u @ rot
    t_v = t_v @ rot

    dist = torch.linalg.norm(c, dim=1)
    phi = torch.asin(torch.clamp(c[:, 2] / dist, -1.0, 1.0))
    theta = torch.atan2(c[:, 1], c[:, 0])
    if track_screen_grad and phi.requires_grad:
        phi.retain_grad()
        theta.retain_grad()
    cos_phi = torch.cos(phi)
    center = dist[:, None] * torch.stack(
        [torch.cos(theta) * cos_phi, torch.sin(theta) * cos_phi, torch.sin(phi)], dim=1
    )

    scales = attrs.scales[rows]
    max_scale = scales.max(dim=1).values
    return SplatFrame(
        center=center,
        basis_u=scales[:, 0:1] * t_u,
        basis_v=scales[:, 1:2] * t_v,
        scales=scales,
        intensity=attrs.intensity[rows],
        raydrop=attrs.raydrop[rows],
        opacity=attrs.opacity[rows],
        center_dist=dist,
        center_phi=phi,
        center_theta=theta,
        half_angle=torch.atan(FOOTPRINT_SIGMA * max_scale / dist),
        attr_rows=rows,
    )


def _ray_plane_normals(phi: Tensor, theta: Tensor) -> tuple[Tensor, Tensor]:
    """Two orthogonal planes through the origin whose intersection is the ray
    at elevation ``phi`` / azimuth ``theta``."""
    sin_t, cos_t = torch.sin(theta), torch.cos(theta)
    sin_p, cos_p = torch.sin(phi), torch.cos(phi)
    zeros = torch.zeros_like(phi)
    n_u = torch.stack([sin_t, -cos_t, zeros], dim=-1)
    n_v = torch.stack([sin_p * cos_t, sin_p * sin_t, -cos_p], dim=-1)
    return n_u, n_v


_GEOMETRY_CACHE: dict = {}


def _pixel_geometry(beams: BeamTable, dtype: torch.dtype = DTYPE) -> tuple[Tensor, Tensor, Tensor, dict]:
    """Per-pixel plane normals and unit ray directions, flattened row-major,
    plus float32 per-component copies for the preselection pass. Cached per
    beam table and dtype."""
    key = (beams.height, beams.width, beams.elevations.tobytes(), dtype)
    hit = _GEOMETRY_CACHE.get(key)
    if hit is not None:
        return hit
    phi = torch.as_tensor(beams.row_elevations(), dtype=dtype)
    theta = torch.as_tensor(beams.column_azimuths(), dtype=dtype)
    phi_g = phi[:, None].expand(beams.height, beams.width).reshape(-1)
    theta_g = theta[None, :].expand(beams.height, beams.width).reshape(-1)
    n_u, n_v = _ray_plane_normals(phi_g, theta_g)
    cos_p = torch.cos(phi_g)
    ray = torch.stack(
        [torch.cos(theta_g) * cos_p, torch.sin(theta_g) * cos_p, torch.sin(phi_g)],
        dim=-1,
    )
    packed = np.empty((n_u.shape[0], 8), dtype=np.float32)
    packed[:, 0] = n_u[:, 0].numpy()
    packed[:, 1] = n_u[:, 1].numpy()
    packed[:, 2:5] = n_v.numpy()
    packed[:, 5:8] = ray.numpy()
    f32 = {"packed": packed}
    if len(_GEOMETRY_CACHE) > 8:
        _GEOMETRY_CACHE.clear()
    _GEOMETRY_CACHE[key] = (n_u, n_v, ray, f32)
    return n_u, n_v, ray, f32


def _intersect_normals(
    frame: SplatFrame,
    gauss: Tensor,
    n_u: Tensor,
    n_v: Tensor,
    ray: Tensor,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Exact ray-splat intersections for (ray, splat) pairs given the two
    pre-computed ray planes and the ray direction.

    Returns (u, v, depth, valid) where (u, v) are tangent-plane coordinates in
    units of the splat scales, depth is the distance of the intersection point
    along the ray, and valid flags a non-degenerate 2x2 solve.
    """
    bu = frame.basis_u[gauss]
    bv = frame.basis_v[gauss]
    c = frame.center[gauss]

    a1 = (n_u * bu).sum(dim=-1)
    b1 = (n_u * bv).sum(dim=-1)
    c1 = (n_u * c).sum(dim=-1)
    a2 = (n_v * bu).sum(dim=-1)
    b2 = (n_v * bv).sum(dim=-1)
    c2 = (n_v * c).sum(dim=-1)

    det = a1 * b2 - a2 * b1
    valid = det.abs() >= DET_EPS
    det_safe = torch.where(valid, det, torch.ones_like(det))
    u = (b1 * c2 - b2 * c1) / det_safe
    v = (a2 * c1 - a1 * c2) / det_safe

    point = c + u[:, None] * bu + v[:, None] * bv
    depth = (point * ray).sum(dim=-1)
    return u, v, depth, valid


def _intersect(
    frame: SplatFrame,
    gauss: Tensor,
    phi: Tensor,
    theta: Tensor,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Ray-splat intersections for explicit (phi, theta) rays."""
    n_u, n_v = _ray_plane_normals(phi, theta)
    cos_p = torch.cos(phi)
    ray = torch.stack(
        [torch.cos(theta) * cos_p, torch.sin(theta) * cos_p, torch.sin(phi)], dim=-1
    )
    return _intersect_normals(frame, gauss, n_u, n_v, ray)


def ray_splat_intersect(
    phi: float, theta: float, frame: SplatFrame
) -> tuple[float, float] | None:
    """Tangent-plane coordinates where the ray (phi, theta) crosses a single
    splat, or None when the splat plane is parallel to the ray."""
    if len(frame) != 1:
        raise ValueError("ray_splat_intersect expects a single-splat frame")
    gauss = torch.zeros(1, dtype=torch.long)
    phi_t = torch.full((1,), float(phi), dtype=frame.center.dtype)
    theta_t = torch.full((1,), float(theta), dtype=frame.center.dtype)
    u, v, _, valid = _intersect(frame, gauss, phi_t, theta_t)
    if not bool(valid[0]):
        return None
    return float(u[0]), float(v[0])


def _expand_ranges(
    carry: list[np.ndarray],
    r0: np.ndarray,
    r1: np.ndarray,
    c0: np.ndarray,
    c1: np.ndarray,
) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Expand inclusive 2-D integer ranges into their member coordinates,
    repeating the carried per-range arrays accordingly."""
    nr = r1 - r0 + 1
    nc = c1 - c0 + 1
    counts = nr * nc
    total = int(counts.sum())
    if total == 0:
        return [a[:0] for a in carry], np.zeros(0, np.int64), np.zeros(0, np.int64)
    rec = np.repeat(np.arange(counts.size, dtype=np.int64), counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(
        np.concatenate([[0], np.cumsum(counts)[:-1]]), counts
    )
    rows = r0[rec] + local // nc[rec]
    cols = c0[rec] + local % nc[rec]
    return [a[rec] for a in carry], rows, cols


def _bin_pairs(frame: SplatFrame, beams: BeamTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Conservative (pixel, splat) candidate pairs via 16x16 tile binning.

    Each splat's falloff support (the tangent-plane disk where its weight can
    still clear the 1/255 skip rule) is bounded in elevation by its exact
    z-extent and radial extent, and in azimuth by the tangent cone of its
    xy-extent, so every contribution compositing could keep is generated
    while oblique and anisotropic splats stay in tight boxes.
    """
    h_count, w_count = beams.height, beams.width
    m = len(frame)
    if m == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)

    theta = frame.center_theta.detach().numpy()
    center = frame.center.detach().numpy()
    bu = frame.basis_u.detach().numpy()
    bv = frame.basis_v.detach().numpy()
    alpha = frame.opacity.detach().numpy()

    with np.errstate(divide="ignore"):
        disk = np.sqrt(np.maximum(2.0 * np.log(255.0 * alpha), 0.0)) * (1.0 + 1e-6) + 1e-6
    visible = alpha * (1.0 + 1e-9) >= SKIP_WEIGHT  # else no pixel can keep it

    # exact extents of the disk: z spread, and the largest singular value of
    # the xy part of [basis_u basis_v] bounds the horizontal spread
    r_z = disk * np.hypot(bu[:, 2], bv[:, 2])
    sq = bu[:, 0] ** 2 + bu[:, 1] ** 2 + bv[:, 0] ** 2 + bv[:, 1] ** 2
    det_xy = bu[:, 0] * bv[:, 1] - bv[:, 0] * bu[:, 1]
    smax = np.sqrt(0.5 * (sq + np.sqrt(np.maximum(sq * sq - 4.0 * det_xy**2, 0.0))))
    r_xy = disk * smax

    rc = np.hypot(center[:, 0], center[:, 1])
    z_lo, z_hi = center[:, 2] - r_z, center[:, 2] + r_z
    rxy_lo = np.maximum(rc - r_xy, 1e-12)
    rxy_hi = rc + r_xy
    corners = np.stack(
        [
            np.arctan2(z_lo, rxy_lo), np.arctan2(z_lo, rxy_hi),
            np.arctan2(z_hi, rxy_lo), np.arctan2(z_hi, rxy_hi),
        ]
    )
    phi_lo = corners.min(axis=0) - 1e-9
    phi_hi = corners.max(axis=0) + 1e-9

    # rows covered by the elevation interval
    elev = beams.elevations
    lo_idx = np.searchsorted(elev, phi_lo, side="left")
    hi_idx = np.searchsorted(elev, phi_hi, side="right") - 1
    row0 = (h_count - 1) - hi_idx
    row1 = (h_count - 1) - lo_idx

    full_az = r_xy >= rc * (1.0 - 1e-12)
    dtheta = np.arcsin(np.clip(r_xy / rc, 0.0, 1.0)) + 1e-9

    def cols_of(theta_lo: np.ndarray, theta_hi: np.ndarray):
        """Inclusive column range for azimuths in [theta_lo, theta_hi]."""
        w_hi = 0.5 * (1.0 - theta_lo / np.pi) * (w_count - 1)
        w_lo = 0.5 * (1.0 - theta_hi / np.pi) * (w_count - 1)
        c0 = np.ceil(w_lo - 1e-9).astype(np.int64)
        c1 = np.floor(w_hi + 1e-9).astype(np.int64)
        ok = c0 <= c1
        return np.clip(c0, 0, w_count - 1), np.clip(c1, 0, w_count - 1), ok

    t_lo = theta - dtheta
    t_hi = theta + dtheta
    g_all = np.arange(m, dtype=np.int64)

    recs_g, recs_r0, recs_r1, recs_c0, recs_c1 = [], [], [], [], []

    def push(idx, c0, c1):
        recs_g.append(g_all[idx])
        recs_r0.append(row0[idx])
        recs_r1.append(row1[idx])
        recs_c0.append(c0)
        recs_c1.append(c1)

    rows_ok = (row0 <= row1) & visible
    idx_full = np.flatnonzero(rows_ok & full_az)
    push(idx_full, np.zeros(idx_full.size, np.int64),
         np.full(idx_full.size, w_count - 1, np.int64))

    partial = rows_ok & ~full_az
    wrap = partial & ((t_hi > np.pi) | (t_lo < -np.pi))
    plain = np.flatnonzero(partial & ~wrap)

    c0, c1, ok = cols_of(t_lo[plain], t_hi[plain])
    push(plain[ok], c0[ok], c1[ok])

    idx = np.flatnonzero(wrap)
    if idx.size:
        # azimuth interval crosses the +-pi seam: split into [lo_a, pi] and
        # [-pi, hi_b], merging when the pieces meet in column space so no
        # (pixel, splat) pair is generated twice
        lo_a = np.where(t_lo[idx] < -np.pi, t_lo[idx] + 2 * np.pi, t_lo[idx])
        hi_b = np.where(t_hi[idx] > np.pi, t_hi[idx] - 2 * np.pi, t_hi[idx])
        a0, a1, ok_a = cols_of(lo_a, np.full(idx.size, np.pi))
        b0, b1, ok_b = cols_of(np.full(idx.size, -np.pi), hi_b)
        merged = ok_a & ok_b & (b0 <= a1 + 1)
        push(idx[merged], np.zeros(int(merged.sum()), np.int64),
             np.full(int(merged.sum()), w_count - 1, np.int64))
        only_a = ok_a & ~merged
        only_b = ok_b & ~merged
        push(idx[only_a], a0[only_a], a1[only_a])
        push(idx[only_b], b0[only_b], b1[only_b])

    g = np.concatenate(recs_g)
    r0 = np.concatenate(recs_r0)
    r1 = np.concatenate(recs_r1)
    c0 = np.concatenate(recs_c0)
    c1 = np.concatenate(recs_c1)

    # ranges -> covered tiles -> pixels inside (tile AND bounding box)
    (carry, tile_r, tile_c) = _expand_ranges(
        [g, r0, r1, c0, c1], r0 // TILE, r1 // TILE, c0 // TILE, c1 // TILE
    )
    g2, r0_2, r1_2, c0_2, c1_2 = carry
    rr0 = np.maximum(r0_2, tile_r * TILE)
    rr1 = np.minimum(r1_2, tile_r * TILE + TILE - 1)
    cc0 = np.maximum(c0_2, tile_c * TILE)
    cc1 = np.minimum(c1_2, tile_c * TILE + TILE - 1)
    (carry, rows, cols) = _expand_ranges([g2], rr0, rr1, cc0, cc1)
    return carry[0], rows, cols


def _preselect_pairs(
    frame: SplatFrame,
    gauss: np.ndarray,
    pix: np.ndarray,
    geom: dict,
) -> np.ndarray:
    """Gradient-free pruning of candidate pairs before the differentiable
    intersection.

    Evaluates the intersection in float32 with generous margins, so every
    pair the exact float64 filters inside ``render_attributes`` could keep
    survives preselection; the exact rules are re-applied on the survivors.
    Keeps the autograd graph proportional to actually visible splats.
    """
    splat = np.empty((len(frame), 11), dtype=np.float32)
    splat[:, 0:3] = frame.basis_u.detach().numpy()
    splat[:, 3:6] = frame.basis_v.detach().numpy()
    splat[:, 6:9] = frame.center.detach().numpy()
    alpha = frame.opacity.detach().numpy().astype(np.float32)
    splat[:, 9] = alpha
    with np.errstate(divide="ignore"):
        # weight >= 1/255  <=>  u^2+v^2 <= 2*ln(255*alpha); exp-free test
        splat[:, 10] = 2.0 * np.log(np.maximum(255.0 * alpha, 1e-30))

    s = splat[gauss]  # one row gather instead of eleven scalar gathers
    g8 = geom["packed"][pix]
    bux, buy, buz = s[:, 0], s[:, 1], s[:, 2]
    bvx, bvy, bvz = s[:, 3], s[:, 4], s[:, 5]
    cx, cy, cz = s[:, 6], s[:, 7], s[:, 8]
    nux, nuy = g8[:, 0], g8[:, 1]
    nvx, nvy, nvz = g8[:, 2], g8[:, 3], g8[:, 4]

    a1 = nux * bux + nuy * buy  # the first ray plane has no z component
    b1 = nux * bvx + nuy * bvy
    c1 = nux * cx + nuy * cy
    a2 = nvx * bux + nvy * buy + nvz * buz
    b2 = nvx * bvx + nvy * bvy + nvz * bvz
    c2 = nvx * cx + nvy * cy + nvz * cz

    det = a1 * b2 - a2 * b1
    # float32 cancellation can misjudge near-degenerate solves, but those
    # intersect far outside the falloff radius and never contribute
    ok = np.abs(det) >= 0.5 * DET_EPS
    det[~ok] = 1.0
    u = (b1 * c2 - b2 * c1) / det
    v = (a2 * c1 - a1 * c2) / det
    r2 = u * u + v * v
    keep = ok & (r2 <= s[:, 10] * (1.0 + 1e-4) + 1e-5)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return idx

    s_i, g8_i, u_i, v_i = s[idx], g8[idx], u[idx], v[idx]
    px = s_i[:, 6] + u_i * s_i[:, 0] + v_i * s_i[:, 3]
    py = s_i[:, 7] + u_i * s_i[:, 1] + v_i * s_i[:, 4]
    pz = s_i[:, 8] + u_i * s_i[:, 2] + v_i * s_i[:, 5]
    depth = px * g8_i[:, 5] + py * g8_i[:, 6] + pz * g8_i[:, 7]
    front = depth > -1e-4
    idx, depth = idx[front], depth[front]

    weight = s_i[front, 9] * np.exp(-0.5 * r2[idx])
    order = np.lexsort((gauss[idx], depth, pix[idx]))
    idx = idx[order]
    live = _truncate_saturated(pix[idx], weight[order] * (1.0 - 1e-6), margin=1e-3)
    return idx[live]


def _truncate_saturated(pix_sorted: np.ndarray, weight: np.ndarray, margin: float = 1e-9) -> np.ndarray:
    """Indices of the per-pixel prefixes the stop rule can still reach.

    A gradient-free pre-pass over the sorted (pixel, weight) records: the
    running log-transmittance is accumulated per pixel and entries past the
    STOP_TRANSMITTANCE cutoff are dropped, with an ulp margin so the exact
    rule applied later inside ``composite`` never loses a contribution.
    """
    n = pix_sorted.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    with np.errstate(divide="ignore"):
        # floor keeps opaque splats finite; one -60 term already forces a stop
        log_attn = np.maximum(np.log1p(-np.minimum(weight, 1.0)), -60.0)
    csum = np.cumsum(log_attn)
    starts = np.zeros(n, dtype=bool)
    starts[0] = True
    starts[1:] = pix_sorted[1:] != pix_sorted[:-1]
    start_idx = np.maximum.accumulate(np.where(starts, np.arange(n), 0))
    base = np.where(start_idx > 0, csum[start_idx - 1], 0.0)
    log_t_before = np.concatenate([[0.0], csum[:-1]]) - base
    log_t_before[starts] = 0.0
    return np.flatnonzero(log_t_before >= np.log(STOP_TRANSMITTANCE) - margin)


def composite(
    pix: Tensor,
    depth: Tensor,
    weight: Tensor,
    intensity: Tensor,
    raydrop: Tensor,
    image_shape: tuple[int, int],
) -> RenderOutput:
    """Front-to-back volume compositing of pre-sorted intersections.

    Inputs are flat per-intersection tensors sorted by (pixel, depth, splat
    index); ``weight`` is opacity times the Gaussian falloff at the
    intersection. Contributions below SKIP_WEIGHT are skipped; traversal
    stops once transmittance falls below STOP_TRANSMITTANCE; the median
    depth records where T first reaches <= 0.5.
    """
    h_count, w_count = image_shape
    dtype = depth.dtype
    out_int = torch.zeros(h_count * w_count, dtype=dtype)
    out_dep = torch.zeros(h_count * w_count, dtype=dtype)
    out_ray = torch.zeros(h_count * w_count, dtype=dtype)
    out_med = torch.zeros(h_count * w_count, dtype=dtype)
    out_t = torch.ones(h_count * w_count, dtype=dtype)
    out_acc = torch.zeros(h_count * w_count, dtype=dtype)

    live = weight >= SKIP_WEIGHT
    if int(live.sum()) == 0:
        return RenderOutput(
            out_int.view(image_shape), out_dep.view(image_shape),
            out_ray.view(image_shape), out_med.view(image_shape),
            out_t.view(image_shape), out_acc.view(image_shape),
        )
    pix, depth = pix[live], depth[live]
    weight, intensity, raydrop = weight[live], intensity[live], raydrop[live]

    uniq, counts = torch.unique_consecutive(pix, return_counts=True)
    n_seg = uniq.shape[0]
    k_max = int(counts.max())
    starts = torch.cumsum(counts, dim=0) - counts
    seg = torch.repeat_interleave(torch.arange(n_seg), counts)
    rank = torch.arange(pix.shape[0]) - starts[seg]

    a = torch.zeros(n_seg, k_max, dtype=dtype)
    dep = torch.zeros(n_seg, k_max, dtype=dtype)
    rho = torch.zeros(n_seg, k_max, dtype=dtype)
    ray = torch.zeros(n_seg, k_max, dtype=dtype)
    a[seg, rank] = weight
    dep[seg, rank] = depth
    rho[seg, rank] = intensity
    ray[seg, rank] = raydrop

    attn = 1.0 - a
    t_after = torch.cumprod(attn, dim=1)
    t_before = torch.cat([torch.ones(n_seg, 1, dtype=dtype), t_after[:, :-1]], dim=1)
    include = t_before >= STOP_TRANSMITTANCE
    w = a * t_before * include.to(dtype)

    out_int[uniq] = (w * rho).sum(dim=1)
    out_dep[uniq] = (w * dep).sum(dim=1)
    out_ray[uniq] = (w * ray).sum(dim=1)
    out_acc[uniq] = w.sum(dim=1)
    out_t[uniq] = torch.where(include, attn, torch.ones_like(attn)).prod(dim=1)

    with torch.no_grad():
        crossed = include & (t_after <= MEDIAN_TRANSMITTANCE) & (a > 0)
        order = torch.where(crossed, torch.arange(k_max).expand(n_seg, -1),
                            torch.full((n_seg, k_max), k_max))
        first = order.min(dim=1).values
        has_median = first < k_max
        gathered = dep.detach().gather(1, first.clamp(max=k_max - 1)[:, None])[:, 0]
        out_med[uniq] = torch.where(has_median, gathered, torch.zeros_like(gathered))

    return RenderOutput(
        out_int.view(image_shape), out_dep.view(image_shape),
        out_ray.view(image_shape), out_med.view(image_shape),
        out_t.view(image_shape), out_acc.view(image_shape),
    )


def render_attributes(
    attrs: ViewAttributes,
    pose: Pose,
    beams: BeamTable,
    min_distance: float = 0.5,
    bruteforce: bool = False,
    track_screen_grad: bool = False,
) -> RenderOutput:
    """Render decoded attributes: build frames, gather candidate pairs (tiled
    or exhaustive), intersect, sort by (pixel, depth, splat), composite."""
    frame = build_splat_frames(attrs, pose, min_distance, track_screen_grad)
    shape = (beams.height, beams.width)
    if len(frame) == 0:
        empty = torch.zeros(0, dtype=attrs.center.dtype)
        out = composite(torch.zeros(0, dtype=torch.long), empty, empty, empty, empty, shape)
        out.attributes, out.frame = attrs, frame
        return out

    if bruteforce:
        n_pix = shape[0] * shape[1]
        gauss = np.tile(np.arange(len(frame), dtype=np.int64), n_pix)
        pix_np = np.repeat(np.arange(n_pix, dtype=np.int64), len(frame))
    else:
        gauss, rows, cols = _bin_pairs(frame, beams)
        pix_np = rows * beams.width + cols

    n_u, n_v, ray, geom32 = _pixel_geometry(beams, attrs.center.dtype)
    surv = _preselect_pairs(frame, gauss, pix_np, geom32)
    gauss, pix_np = gauss[surv], pix_np[surv]

    gauss_t = torch.as_tensor(gauss)
    pix_t = torch.as_tensor(pix_np)
    u, v, depth, valid = _intersect_normals(
        frame, gauss_t, n_u[pix_t], n_v[pix_t], ray[pix_t]
    )
    falloff = torch.exp(-0.5 * (u * u + v * v))
    weight = frame.opacity[gauss_t] * falloff
    keep = valid & (depth > 0.0) & (weight >= SKIP_WEIGHT)
    keep_np = keep.numpy()

    pix_k = pix_np[keep_np]
    if attrs.center.dtype == torch.float64:
        order = np.lexsort((gauss[keep_np], depth.detach().numpy()[keep_np], pix_k))
    else:
        # float32 preselection already ordered by (pixel, depth, splat) with
        # bit-identical float32 depth; masking preserves that order
        order = np.arange(pix_k.size)
    pix_sorted = pix_k[order]
    weight_np = weight.detach().numpy()[keep_np][order]
    live = _truncate_saturated(pix_sorted, weight_np)

    sel = torch.as_tensor(np.flatnonzero(keep_np)[order[live]])
    g_sel = gauss_t[sel]
    out = composite(
        torch.as_tensor(pix_sorted[live]),
        depth[sel],
        weight[sel],
        frame.intensity[g_sel],
        frame.raydrop[g_sel],
        shape,
    )
    out.attributes, out.frame = attrs, frame
    return out


def render(
    scene,
    pose: Pose,
    beams: BeamTable,
    track_screen_grad: bool = False,
) -> RenderOutput:
    """Decode the scene at ``pose`` and rasterize with tile binning."""
    from .field import decode_attributes

    attrs = decode_attributes(scene, pose)
    return render_attributes(
        attrs, pose, beams,
        min_distance=scene.config.min_distance,
        track_screen_grad=track_screen_grad,
    )


def render_bruteforce(scene, pose: Pose, beams: BeamTable) -> RenderOutput:
    """Reference renderer: every splat tested against every pixel."""
    from .field import decode_attributes

    attrs = decode_attributes(scene, pose)
    return render_attributes(
        attrs, pose, beams, min_distance=scene.config.min_distance, bruteforce=True
    )


def median_scale_delta(attrs: ViewAttributes) -> float:
    """Median over splats of the larger scale axis (lower-middle element for
    even counts); the distortion-mask threshold."""
    if len(attrs) == 0:
        raise ValueError("no Gaussians to take a median over")
    max_scale = attrs.scales.detach().max(dim=1).values
    sorted_vals, _ = torch.sort(max_scale)
    return float(sorted_vals[(len(attrs) - 1) // 2])


def distortion_mask(out: RenderOutput, delta: float) -> DistortionMask:
    """Flag pixels whose median depth is missing or disagrees with the
    expected depth by more than ``delta``. Pixels without returns
    (accumulation < 0.1) are left unflagged."""
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    acc = out.accumulation.detach().numpy()
    med = out.median_depth.detach().numpy()
    dep = out.depth.detach().numpy()
    has_returns = acc >= 0.1
    disagree = (med == 0.0) | (np.abs(med - dep) > delta)
    return DistortionMask(mask=has_returns & disagree, delta=float(delta))
