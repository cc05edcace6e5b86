"""LiDAR novel-view synthesis: a neural 2D Gaussian field trained from
single-pass scans, rendered through a differentiable range-view rasterizer,
and expanded to extrapolated viewpoints by distortion-masked distillation of
generated scans."""

from .field import (
    Scene,
    SceneConfig,
    ViewAttributes,
    decode_attributes,
    init_scene,
    load_checkpoint,
    perturbed_decode,
    save_checkpoint,
)
from .formats import Frame, Manifest, load_manifest, read_ply, read_rvim, save_manifest, write_ply, write_rvim
from .rangeview import BeamTable, Pose, RangeImage, nearest_beam, pixel_to_ray, project_points, unproject
from .rasterizer import (
    DistortionMask,
    RenderOutput,
    SplatFrame,
    build_splat_frames,
    composite,
    distortion_mask,
    median_scale_delta,
    ray_splat_intersect,
    render,
    render_bruteforce,
)
from .training import LossConfig, adam_step, backward, densify_and_prune, loss, reconstruct_single_pass

__version__ = "0.1.0"
