"""Grid geometry, volumes, 4D sequences, and displacement fields.

Conventions shared by every other module:

* Voxel data is float32, indexed ``data[x, y, z]``; the serialized layout
  (see :mod:`cosf.volio`) is x-fastest.
* Displacement vectors are stored in voxel units of their own grid,
  component-first: ``vectors[c, x, y, z]`` with c in (x, y, z).
* All containers are immutable after construction (arrays are marked
  read-only), so instances can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid3:
    """Voxel counts and physical spacing of a 3D grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("Grid3 needs 3 dims and 3 spacings")
        if any(d < 2 for d in dims):
            raise ValueError(f"all dims must be >= 2, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"all spacings must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def nvox(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.flags.writeable = False
    return arr


class Volume:
    """A scalar intensity field on a :class:`Grid3`."""

    __slots__ = ("grid", "data")

    def __init__(self, grid: Grid3, data: np.ndarray):
        data = np.asarray(data, dtype=np.float32)
        if data.shape != grid.dims:
            raise ValueError(f"data shape {data.shape} != grid dims {grid.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "data", _freeze(data))

    def __setattr__(self, name, value):
        raise AttributeError("Volume is immutable")

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.grid == other.grid
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"Volume(dims={self.grid.dims}, range=[{self.data.min():.4g}, {self.data.max():.4g}])"


class DisplacementField:
    """Per-voxel 3-vector displacements, in voxel units of ``grid``."""

    __slots__ = ("grid", "vectors")

    def __init__(self, grid: Grid3, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.shape != (3,) + grid.dims:
            raise ValueError(
                f"vectors shape {vectors.shape} != (3,)+dims {(3,) + grid.dims}"
            )
        if not np.all(np.isfinite(vectors)):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "vectors", _freeze(vectors))

    def __setattr__(self, name, value):
        raise AttributeError("DisplacementField is immutable")

    def __eq__(self, other):
        return (
            isinstance(other, DisplacementField)
            and self.grid == other.grid
            and np.array_equal(self.vectors, other.vectors)
        )

    @classmethod
    def zero(cls, grid: Grid3) -> "DisplacementField":
        return cls(grid, np.zeros((3,) + grid.dims, dtype=np.float32))

    def __repr__(self):
        mag = np.sqrt((self.vectors.astype(np.float64) ** 2).sum(axis=0))
        return f"DisplacementField(dims={self.grid.dims}, max|v|={mag.max():.4g})"


@dataclass(frozen=True)
class PhiPair:
    """A bidirectional displacement pair on one shared grid."""

    m2f: DisplacementField
    f2m: DisplacementField

    def __post_init__(self):
        if self.m2f.grid != self.f2m.grid:
            raise ValueError("m2f and f2m must share one grid")

    @property
    def grid(self) -> Grid3:
        return self.m2f.grid


class Sequence4D:
    """K respiratory phases of volumes on one shared grid."""

    __slots__ = ("phases",)

    def __init__(self, phases):
        phases = tuple(phases)
        if len(phases) < 2:
            raise ValueError("Sequence4D needs K >= 2 phases")
        grid = phases[0].grid
        for k, p in enumerate(phases):
            if p.grid != grid:
                raise ValueError(f"phase {k} grid {p.grid.dims} != phase 0 grid {grid.dims}")
        object.__setattr__(self, "phases", phases)

    def __setattr__(self, name, value):
        raise AttributeError("Sequence4D is immutable")

    def __len__(self):
        return len(self.phases)

    def __getitem__(self, k) -> Volume:
        return self.phases[k]

    @property
    def grid(self) -> Grid3:
        return self.phases[0].grid


@dataclass(frozen=True)
class RegistrationPair:
    """A (moving, fixed) phase pair with its phase-range grade."""

    moving: Volume
    fixed: Volume
    phase_i: int
    phase_j: int
    grade: int

    def __post_init__(self):
        if self.phase_i == self.phase_j:
            raise ValueError("phase_i must differ from phase_j")
        if self.grade not in (1, 2, 3, 4):
            raise ValueError(f"grade must be in 1..4, got {self.grade}")


def normalize_intensity(v: Volume) -> Volume:
    """Min-max normalize a volume to [0, 1].

    Rejects constant volumes (zero dynamic range).
    """
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi <= lo:
        raise ValueError("cannot normalize a constant volume (zero dynamic range)")
    # f64 intermediate so the extremes land exactly on 0 and 1 after the cast
    out = (v.data.astype(np.float64) - lo) / (hi - lo)
    return Volume(v.grid, out.astype(np.float32))
