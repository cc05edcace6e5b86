"""File formats: RVIM range images, binary PLY point clouds, scene manifests."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rangeview import BeamTable, Pose, RangeImage, project_points

__all__ = [
    "FormatError",
    "read_rvim",
    "write_rvim",
    "read_ply",
    "write_ply",
    "Frame",
    "Manifest",
    "load_manifest",
    "save_manifest",
]

RVIM_MAGIC = b"RVIM"
RVIM_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed or unsupported on-disk data."""


def write_rvim(path: str | Path, img: RangeImage) -> None:
    """Write a range image: magic, u32 version/H/W, then the three channels
    (depth, intensity, raydrop) as little-endian float32, row-major planes."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(RVIM_MAGIC)
        fh.write(struct.pack("<III", RVIM_VERSION, img.height, img.width))
        for chan in (img.depth, img.intensity, img.raydrop):
            fh.write(np.ascontiguousarray(chan, dtype="<f4").tobytes())


def read_rvim(path: str | Path) -> RangeImage:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated RVIM header")
    if raw[:4] != RVIM_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {RVIM_MAGIC!r}")
    version, height, width = struct.unpack_from("<III", raw, 4)
    if version != RVIM_VERSION:
        raise FormatError(f"{path}: unsupported RVIM version {version}")
    expected = 16 + 3 * height * width * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} != expected {expected}")
    planes = np.frombuffer(raw, dtype="<f4", offset=16).reshape(3, height, width)
    return RangeImage(planes[0], planes[1], planes[2])


def write_ply(path: str | Path, points: np.ndarray) -> None:
    """Write points (N, 4: x, y, z, intensity) as binary little-endian PLY."""
    points = np.asarray(points, dtype=np.float64)
    if points.size and (points.ndim != 2 or points.shape[1] != 4):
        raise ValueError("points must have shape (N, 4)")
    n = 0 if points.size == 0 else points.shape[0]
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property float intensity\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if n:
            fh.write(np.ascontiguousarray(points, dtype="<f4").tobytes())


def read_ply(path: str | Path) -> np.ndarray:
    """Read a binary little-endian PLY with float x/y/z (+ optional intensity).

    Extra float32 vertex properties are skipped; anything else is rejected.
    Returns points with shape (N, 4); missing intensity reads as zero.
    """
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    count = None
    props: list[str] = []
    in_vertex = False
    fmt_ok = False
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError(f"{path}: list properties are not supported")
            if parts[1] not in ("float", "float32"):
                raise FormatError(f"{path}: non-float32 property {parts[2]!r}")
            props.append(parts[2])
    if not fmt_ok:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    for needed in ("x", "y", "z"):
        if needed not in props:
            raise FormatError(f"{path}: missing property {needed!r}")

    stride = 4 * len(props)
    if len(body) < count * stride:
        raise FormatError(f"{path}: vertex data truncated")
    data = np.frombuffer(body, dtype="<f4", count=count * len(props))
    data = data.reshape(count, len(props)).astype(np.float64)
    out = np.zeros((count, 4))
    for j, name in enumerate(("x", "y", "z", "intensity")):
        if name in props:
            out[:, j] = data[:, props.index(name)]
    return out


@dataclass
class Frame:
    """One scan of a trajectory: pose plus either an on-disk or in-memory scan."""

    pose: Pose
    scan_path: Path | None = None
    image: RangeImage | None = None

    def load(self, beams: BeamTable) -> RangeImage:
        """Return the scan as a range image, projecting PLY inputs on the fly."""
        if self.image is not None:
            return self.image
        if self.scan_path is None:
            raise ValueError("frame has neither an in-memory image nor a scan path")
        suffix = self.scan_path.suffix.lower()
        if suffix == ".rvim":
            img = read_rvim(self.scan_path)
            if img.shape != (beams.height, beams.width):
                raise FormatError(
                    f"{self.scan_path}: scan is {img.shape}, beams expect "
                    f"({beams.height}, {beams.width})"
                )
            return img
        if suffix == ".ply":
            return project_points(read_ply(self.scan_path), beams)
        raise FormatError(f"{self.scan_path}: unsupported scan format {suffix!r}")


@dataclass
class Manifest:
    """A trajectory of posed scans sharing one beam table."""

    beams: BeamTable
    frames: list[Frame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("beams", "width", "frames"):
        if key not in payload:
            raise FormatError(f"{path}: missing manifest key {key!r}")
    beams = BeamTable(np.asarray(payload["beams"], dtype=np.float64), int(payload["width"]))
    frames = []
    for i, entry in enumerate(payload["frames"]):
        if "pose" not in entry or "scan" not in entry:
            raise FormatError(f"{path}: frame {i} needs 'pose' and 'scan'")
        mat = np.asarray(entry["pose"], dtype=np.float64)
        if mat.size != 16:
            raise FormatError(f"{path}: frame {i} pose must hold 16 floats")
        pose = Pose(mat.reshape(4, 4), float(entry.get("timestamp", 0.0)))
        frames.append(Frame(pose=pose, scan_path=(path.parent / entry["scan"])))
    return Manifest(beams=beams, frames=frames)


def save_manifest(manifest: Manifest, path: str | Path, scan_dir: str = "scans") -> None:
    """Write the manifest JSON, materializing in-memory scans as RVIM files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, frame in enumerate(manifest.frames):
        if frame.scan_path is not None:
            rel = frame.scan_path
            if rel.is_absolute():
                rel = Path(rel).relative_to(path.parent)
            scan_rel = str(rel)
        else:
            if frame.image is None:
                raise ValueError(f"frame {i} has no scan to save")
            scan_rel = f"{scan_dir}/{path.stem}_{i:04d}.rvim"
            target = path.parent / scan_rel
            target.parent.mkdir(parents=True, exist_ok=True)
            write_rvim(target, frame.image)
        entries.append(
            {
                "pose": [float(v) for v in frame.pose.matrix.reshape(-1)],
                "timestamp": frame.pose.timestamp,
                "scan": scan_rel,
            }
        )
    payload = {
        "beams": [float(v) for v in manifest.beams.elevations],
        "width": manifest.beams.width,
        "frames": entries,
    }
    path.write_text(json.dumps(payload, indent=2))
