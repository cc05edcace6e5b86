"""RVIM range-image file I/O.

Wire format shared with the reconstruction engine: magic "RVIM", u32
version=1, u32 H, u32 W, then depth / intensity / raydrop planes as
little-endian float32, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RVIM"
VERSION = 1


class RvimError(ValueError):
    pass


def read_rvim(path) -> np.ndarray:
    """Returns the image as a (3, H, W) float32 array: depth, intensity, raydrop."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise RvimError(f"{path}: not an RVIM file")
    version, height, width = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise RvimError(f"{path}: unsupported version {version}")
    expected = 16 + 3 * height * width * 4
    if len(raw) != expected:
        raise RvimError(f"{path}: size {len(raw)} != {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(3, height, width).copy()


def write_rvim(path, planes: np.ndarray) -> None:
    planes = np.asarray(planes, dtype=np.float32)
    if planes.ndim != 3 or planes.shape[0] != 3:
        raise ValueError("expected (3, H, W) planes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, planes.shape[1], planes.shape[2]))
        fh.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())
