"""Bit-exact file formats for volumes, displacement fields, and slice images.

MVOL1 / MDVF1 are a JSON header document plus a sibling raw file
(``<path>.raw``) of little-endian float32 values, x-fastest; displacement
files interleave the 3 components per voxel. Slice exports are 16-bit
binary PGM (P5, big-endian samples per the PGM standard).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import DisplacementField, Grid3, Volume

MVOL_MAGIC = "MVOL1"
MDVF_MAGIC = "MDVF1"


class FormatError(ValueError):
    """Raised when a file fails header or payload validation."""


def _raw_path(path) -> Path:
    return Path(str(path) + ".raw")


def _write_header(path, magic: str, grid: Grid3) -> None:
    header = {
        "magic": magic,
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing),
        "dtype": "f32le",
    }
    Path(path).write_text(json.dumps(header) + "\n", encoding="utf-8")


def _read_header(path, magic: str) -> Grid3:
    try:
        header = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON header: {e}") from e
    if header.get("magic") != magic:
        raise FormatError(f"{path}: bad magic {header.get('magic')!r}, expected {magic!r}")
    if header.get("dtype") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    dims = header.get("dims")
    spacing = header.get("spacing_mm")
    if not (isinstance(dims, list) and len(dims) == 3):
        raise FormatError(f"{path}: malformed dims {dims!r}")
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise FormatError(f"{path}: malformed spacing_mm {spacing!r}")
    return Grid3(tuple(dims), tuple(spacing))


def _read_payload(path, count: int, what: str) -> np.ndarray:
    raw = _raw_path(path)
    if not raw.exists():
        raise FormatError(f"{raw}: missing raw payload file")
    data = np.fromfile(raw, dtype="<f4")
    if data.size != count:
        raise FormatError(
            f"{raw}: payload holds {data.size} floats, header dims imply {count}"
        )
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{raw}: {what} payload contains non-finite values")
    return data


def write_volume(v: Volume, path) -> None:
    _write_header(path, MVOL_MAGIC, v.grid)
    # (x,y,z)-indexed array -> x-fastest flat order
    v.data.transpose(2, 1, 0).astype("<f4").tofile(_raw_path(path))


def read_volume(path) -> Volume:
    grid = _read_header(path, MVOL_MAGIC)
    nx, ny, nz = grid.dims
    data = _read_payload(path, grid.nvox, "volume")
    return Volume(grid, data.reshape(nz, ny, nx).transpose(2, 1, 0))


def write_dvf(phi: DisplacementField, path) -> None:
    _write_header(path, MDVF_MAGIC, phi.grid)
    # components interleaved per voxel, voxels x-fastest
    phi.vectors.transpose(3, 2, 1, 0).astype("<f4").tofile(_raw_path(path))


def read_dvf(path) -> DisplacementField:
    grid = _read_header(path, MDVF_MAGIC)
    nx, ny, nz = grid.dims
    data = _read_payload(path, 3 * grid.nvox, "displacement")
    return DisplacementField(grid, data.reshape(nz, ny, nx, 3).transpose(3, 2, 1, 0))


def window_to_u16(values: np.ndarray, center: float, width: float) -> np.ndarray:
    """Map intensities through a (center, width) grayscale window to uint16.

    t -> clamp((t - (C - W/2)) / W, 0, 1) * 65535, rounded to nearest with
    ties away from zero (i.e. ties up).
    """
    if width <= 0:
        raise ValueError("window width must be > 0")
    lo = center - width / 2.0
    t = (values.astype(np.float64) - lo) / width
    t = np.clip(t, 0.0, 1.0) * 65535.0
    return np.floor(t + 0.5).astype(np.uint16)


def export_slice(v: Volume, axis: str, index: int, window: tuple[float, float], path) -> None:
    """Write one slice of a volume as a 16-bit binary PGM under a grayscale window."""
    axes = {"x": 0, "y": 1, "z": 2}
    if axis not in axes:
        raise ValueError(f"axis must be one of x|y|z, got {axis!r}")
    ax = axes[axis]
    n = v.grid.dims[ax]
    if not (0 <= index < n):
        raise IndexError(f"slice index {index} out of range for axis {axis} (dim {n})")
    sl = np.take(v.data, index, axis=ax)
    # remaining axes keep (fast, slow) order; PGM rows scan the slow axis
    pixels = window_to_u16(sl, window[0], window[1])
    height, width = pixels.shape[1], pixels.shape[0]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        fh.write(pixels.T.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    """Read a 16-bit binary PGM back as a (width, height) uint16 array (test aid)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    width, height = (int(t) for t in parts[1].split())
    maxval = int(parts[2])
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit PGM, maxval {maxval}")
    pixels = np.frombuffer(parts[3], dtype=">u2", count=width * height)
    return pixels.reshape(height, width).T.astype(np.uint16)
