"""Neural 2D Gaussian field: anchors carrying feature tokens, decoded into
per-view splat attributes by four small ReLU networks conditioned on the
local ray direction and the distance of flight."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .rangeview import Pose

__all__ = [
    "DTYPE",
    "SceneConfig",
    "Mlp",
    "AttributeNetworks",
    "Scene",
    "ViewAttributes",
    "init_scene",
    "decode_attributes",
    "perturbed_decode",
    "save_checkpoint",
    "load_checkpoint",
]

# CPU float64 everywhere: rendering stays exactly reproducible and analytic
# gradients survive finite-difference checks at tight tolerances.
DTYPE = torch.float64

NETWORK_ORDER = ("geometry", "intensity", "raydrop", "opacity")
GEOMETRY_HEAD = 9  # quaternion 4 + scale 2 + offset 3


@dataclass
class SceneConfig:
    token_dim: int = 32
    hidden_dim: int = 64
    max_scale: float = 2.0       # meters; decoded scales are sigmoid-bounded by this
    max_offset: float = 0.1      # meters; center refinement bound (tanh)
    distance_norm: float = 80.0  # meters; distance conditioning divisor
    min_distance: float = 0.5    # meters; anchors closer to the sensor are dropped
    anchor_count: int = 8000
    dtype: str = "float64"       # float64 for gradient checks, float32 for speed

    @property
    def input_dim(self) -> int:
        return self.token_dim + 4  # token + unit direction (3) + distance (1)

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


class Mlp:
    """Two-hidden-layer perceptron with ReLU, stored as explicit tensors."""

    def __init__(self, sizes: list[int], generator: torch.Generator | None = None,
                 dtype: torch.dtype = DTYPE):
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = torch.empty(fan_out, fan_in, dtype=dtype)
            if generator is not None:
                bound = 1.0 / np.sqrt(fan_in)
                w.uniform_(-bound, bound, generator=generator)
            else:
                w.zero_()
            self.weights.append(w)
            self.biases.append(torch.zeros(fan_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.T + b
            if i < len(self.weights) - 1:
                x = torch.relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class AttributeNetworks:
    """The four attribute decoders sharing the 36-dim conditioning input."""

    geometry: Mlp   # -> quaternion (4) + raw scales (2) + raw offset (3)
    intensity: Mlp  # -> 1
    raydrop: Mlp    # -> 1
    opacity: Mlp    # -> 1

    @classmethod
    def create(cls, cfg: SceneConfig, generator: torch.Generator) -> "AttributeNetworks":
        dims = [cfg.input_dim, cfg.hidden_dim, cfg.hidden_dim]
        nets = {}
        for name in NETWORK_ORDER:
            head = GEOMETRY_HEAD if name == "geometry" else 1
            nets[name] = Mlp(dims + [head], generator, dtype=cfg.torch_dtype)
        # identity-rotation bias so an untrained head decodes a valid quaternion
        with torch.no_grad():
            nets["geometry"].biases[-1][0] = 1.0
        return cls(**nets)

    def named(self) -> list[tuple[str, Mlp]]:
        return [(name, getattr(self, name)) for name in NETWORK_ORDER]


class Scene:
    """Trainable state: anchor positions, feature tokens, attribute networks."""

    def __init__(
        self,
        positions: Tensor,
        tokens: Tensor,
        networks: AttributeNetworks,
        config: SceneConfig,
    ):
        if positions.shape[0] < 1:
            raise ValueError("scene needs at least one anchor")
        self.positions = positions  # (N, 3), not optimized directly
        self.tokens = tokens        # (N, token_dim)
        self.networks = networks
        self.config = config
        self.opt_state: dict | None = None  # transient optimizer moments

    @property
    def anchor_count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def dtype(self) -> torch.dtype:
        return self.tokens.dtype

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups = {"tokens": [self.tokens]}
        for name, net in self.networks.named():
            groups[name] = net.parameters()
        return groups

    def requires_grad_(self, flag: bool) -> "Scene":
        for tensors in self.parameter_groups().values():
            for t in tensors:
                t.requires_grad_(flag)
        return self


@dataclass
class ViewAttributes:
    """Per-Gaussian attributes decoded for one pose (all torch tensors)."""

    center: Tensor      # (M, 3) world frame, anchor position + decoded offset
    rotation: Tensor    # (M, 4) unit quaternion (w, x, y, z), world frame
    scales: Tensor      # (M, 2) meters, in (0, max_scale)
    intensity: Tensor   # (M,) in (0, 1)
    raydrop: Tensor     # (M,) in (0, 1)
    opacity: Tensor     # (M,) in (0, 1)
    anchor_ids: Tensor  # (M,) long, indices into the scene's anchor arrays

    def __len__(self) -> int:
        return int(self.center.shape[0])


def init_scene(
    points: np.ndarray,
    anchor_count: int,
    seed: int,
    config: SceneConfig | None = None,
) -> Scene:
    """Seeded scene: anchors subsampled uniformly from ``points`` (with
    replacement only when the cloud is smaller), zero tokens, and network
    weights drawn uniformly at +-1/sqrt(fan_in)."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("cannot initialize a scene from an empty point cloud")
    if anchor_count < 1:
        raise ValueError("anchor_count must be >= 1")
    config = config or SceneConfig()

    rng = np.random.default_rng(seed)
    replace = anchor_count > points.shape[0]
    idx = rng.choice(points.shape[0], size=anchor_count, replace=replace)
    positions = torch.as_tensor(points[idx, :3], dtype=config.torch_dtype)

    gen = torch.Generator().manual_seed(seed)
    tokens = torch.zeros(anchor_count, config.token_dim, dtype=config.torch_dtype)
    networks = AttributeNetworks.create(config, gen)
    return Scene(positions, tokens, networks, config)


def _decode(
    scene: Scene,
    pose: Pose,
    input_noise: Tensor | None = None,
    keep_mask: Tensor | None = None,
) -> ViewAttributes:
    cfg = scene.config
    rot = torch.as_tensor(pose.rotation, dtype=scene.dtype)
    trans = torch.as_tensor(pose.translation, dtype=scene.dtype)

    local = (scene.positions - trans) @ rot  # sensor-frame displacement (N, 3)
    dist = torch.linalg.norm(local, dim=1)
    keep = dist >= cfg.min_distance
    if keep_mask is not None:
        keep = keep & keep_mask
    ids = torch.nonzero(keep, as_tuple=False).squeeze(1)

    dirs = local[ids] / dist[ids, None]
    inputs = torch.cat(
        [scene.tokens[ids], dirs, (dist[ids] / cfg.distance_norm)[:, None]], dim=1
    )
    if input_noise is not None:
        inputs = inputs + input_noise[ids]

    geo = scene.networks.geometry(inputs)
    quat_raw = geo[:, :4]
    quat = quat_raw / torch.linalg.norm(quat_raw, dim=1, keepdim=True).clamp_min(1e-12)
    scales = cfg.max_scale * torch.sigmoid(geo[:, 4:6])
    offset = cfg.max_offset * torch.tanh(geo[:, 6:9])

    return ViewAttributes(
        center=scene.positions[ids] + offset,
        rotation=quat,
        scales=scales,
        intensity=torch.sigmoid(scene.networks.intensity(inputs)[:, 0]),
        raydrop=torch.sigmoid(scene.networks.raydrop(inputs)[:, 0]),
        opacity=torch.sigmoid(scene.networks.opacity(inputs)[:, 0]),
        anchor_ids=ids,
    )


def decode_attributes(scene: Scene, pose: Pose) -> ViewAttributes:
    """Decode per-view attributes for every anchor at least ``min_distance``
    from the sensor. Attributes depend on the pose only through the local
    ray direction and the distance of flight."""
    return _decode(scene, pose)


def perturbed_decode(
    scene: Scene,
    pose: Pose,
    sigma: float,
    tau: float,
    seed: int,
) -> ViewAttributes:
    """Decode with i.i.d. Gaussian noise (std ``sigma``) on every network
    input component and a seeded dropout removing a ``tau`` fraction of
    Gaussians. With sigma = tau = 0 this matches ``decode_attributes``."""
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if not 0.0 <= tau < 1.0:
        raise ValueError("tau must be in [0, 1)")
    cfg = scene.config
    n = scene.anchor_count
    gen = torch.Generator().manual_seed(seed)
    noise = sigma * torch.randn(n, cfg.input_dim, dtype=scene.dtype, generator=gen)
    keep = torch.rand(n, dtype=scene.dtype, generator=gen) >= tau
    return _decode(scene, pose, input_noise=noise, keep_mask=keep)


def _tensor_entries(scene: Scene) -> list[tuple[str, Tensor]]:
    entries = [("positions", scene.positions), ("tokens", scene.tokens)]
    for name, net in scene.networks.named():
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            entries.append((f"{name}.{i}.weight", w))
            entries.append((f"{name}.{i}.bias", b))
    return entries


def save_checkpoint(scene: Scene, path: str | Path) -> None:
    """JSON header followed by little-endian float32 blobs: anchor positions,
    tokens, then each network's weights and biases in declared order."""
    entries = _tensor_entries(scene)
    header = {
        "format_version": 1,
        "anchor_count": scene.anchor_count,
        "config": asdict(scene.config),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in entries],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in entries:
            fh.write(t.detach().numpy().astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> Scene:
    from .formats import FormatError

    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated checkpoint")
    (header_len,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + header_len:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header ({exc})") from exc
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version")

    config = SceneConfig(**header["config"])
    offset = 4 + header_len
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        if arr.size != count:
            raise FormatError(f"{path}: blob for {spec['name']} truncated")
        offset += count * 4
        tensors[spec["name"]] = torch.as_tensor(
            arr.reshape(shape).astype(np.float64), dtype=config.torch_dtype
        )

    networks = AttributeNetworks.create(config, torch.Generator().manual_seed(0))
    for name, net in networks.named():
        for i in range(len(net.weights)):
            net.weights[i] = tensors[f"{name}.{i}.weight"].clone()
            net.biases[i] = tensors[f"{name}.{i}.bias"].clone()
    return Scene(
        positions=tensors["positions"].clone(),
        tokens=tensors["tokens"].clone(),
        networks=networks,
        config=config,
    )
