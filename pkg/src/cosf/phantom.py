"""Synthetic 4D breathing phantoms with analytically known motion.

The scene is a smooth analytic function of continuous HR voxel coordinates:
a soft-tissue ellipsoid body split by a diaphragm interface, a bright
tumor sphere riding on the motion, and a few vessel-like line segments for
in-plane texture. Phase k is the scene evaluated through the ground-truth
displacement a_k * b(x) (pulling convention), so every frame is exact and
free of resampling error. The low-resolution sequence is an in-plane
Gaussian blur of the HR frame, resampled to the coarse grid under the same
align-corners correspondence used everywhere else, plus clipped Gaussian
noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autograd as ag
from .core import DisplacementField, Grid3, RegistrationPair, Sequence4D, Volume

_F32 = np.float32


@dataclass(frozen=True)
class PhantomSpec:
    """Everything that determines a phantom dataset, bitwise."""

    grid_lr: Grid3 = Grid3((40, 32, 16), (2.7, 2.7, 3.0))
    K: int = 10
    amplitude_max: float = 3.0
    body_semiaxes: tuple[float, float, float] = (0.42, 0.40, 0.46)  # fractions of extent
    tumor_center: tuple[float, float, float] = (0.50, 0.44, 0.30)   # fractional coords
    tumor_radius: float = 0.085      # in-plane, fraction of extent
    tumor_half_z: float = 0.18       # z half-height, fraction of extent
    tumor_intensity: float = 0.85
    vessel_count: int = 4
    vessel_radius: float = 0.018
    vessel_intensity: float = 0.72
    diaphragm_frac: float = 0.5        # z position of the interface, fraction of nz-1
    noise_sigma: float = 0.01
    blur_fwhm: float = 2.0             # HR voxels, in-plane
    seed: int = 0

    def __post_init__(self):
        if self.amplitude_max < 0:
            raise ValueError("amplitude_max must be >= 0")
        if not (0 <= self.noise_sigma < 0.2):
            raise ValueError("noise_sigma must be in [0, 0.2)")
        if self.K < 2:
            raise ValueError("need K >= 2 phases")

    @property
    def grid_hr(self) -> Grid3:
        nx, ny, nz = self.grid_lr.dims
        sx, sy, sz = self.grid_lr.spacing
        return Grid3((2 * nx, 2 * ny, nz), (sx / 2, sy / 2, sz))

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["grid_lr"] = {"dims": list(self.grid_lr.dims), "spacing_mm": list(self.grid_lr.spacing)}
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        d = json.loads(text)
        g = d.pop("grid_lr", None)
        kwargs = {}
        for name in cls.__dataclass_fields__:
            if name == "grid_lr":
                continue
            if name in d:
                val = d[name]
                kwargs[name] = tuple(val) if isinstance(val, list) else val
        if g is not None:
            kwargs["grid_lr"] = Grid3(tuple(g["dims"]), tuple(g.get("spacing_mm", (1, 1, 1))))
        return cls(**kwargs)


@dataclass(frozen=True)
class GroundTruth:
    """Per-phase displacement oracles on both grids, plus phase amplitudes."""

    fields_lr: tuple[DisplacementField, ...]
    fields_hr: tuple[DisplacementField, ...]
    amplitudes: tuple[float, ...]

    def pair_field(self, i: int, j: int, hr: bool = True) -> DisplacementField:
        """First-order field warping phase i toward phase j: (a_j - a_i) * b."""
        fields = self.fields_hr if hr else self.fields_lr
        a = self.amplitudes
        ref = max(range(len(a)), key=lambda k: abs(a[k]))
        basis = fields[ref].vectors / _F32(a[ref]) if a[ref] != 0 else fields[ref].vectors
        return DisplacementField(fields[0].grid, basis * _F32(a[j] - a[i]))


def amplitude_profile(K: int, amplitude_max: float) -> list[float]:
    """a_k = A * sin^2(pi k / K): zero at end-of-exhale, peak at k = K/2."""
    if K < 2:
        raise ValueError("need K >= 2")
    return [float(amplitude_max * np.sin(np.pi * k / K) ** 2) for k in range(K)]


def _cos_taper(u: np.ndarray, margin: float) -> np.ndarray:
    """1 in the interior, smooth cosine roll-off to 0 at 0 and 1."""
    d = np.minimum(u, 1.0 - u)
    t = np.clip(d / margin, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def motion_basis(grid: Grid3, diaphragm_z: float | None = None) -> DisplacementField:
    """Unit superior-inferior motion bump centered on the diaphragm plane.

    z-component only: a Gaussian of width nz/6 in z, times smooth in-plane
    and axial tapers that vanish at the volume boundary. Max norm is
    exactly 1 (attained on the diaphragm plane when it sits on a voxel).
    """
    nx, ny, nz = grid.dims
    if diaphragm_z is None:
        diaphragm_z = (nz - 1) / 2.0
    sigma_b = nz / 6.0
    xs = np.arange(nx, dtype=np.float64) / (nx - 1)
    ys = np.arange(ny, dtype=np.float64) / (ny - 1)
    zs = np.arange(nz, dtype=np.float64)

    # in-plane taper slope stays below the Gaussian slope bound (1/sigma_b)e^-1/2;
    # the z taper hugs the boundary where the Gaussian is already in its far tail
    def margin_xy(n):
        return min(0.5, max(0.3, 0.75 * nz / (n - 1)))

    tx = _cos_taper(xs, margin_xy(nx))
    ty = _cos_taper(ys, margin_xy(ny))
    tz = _cos_taper(zs / (nz - 1), 0.15)
    gz = np.exp(-((zs - diaphragm_z) ** 2) / (2.0 * sigma_b ** 2))
    bump = tx[:, None, None] * ty[None, :, None] * (tz * gz)[None, None, :]
    peak = bump.max()
    if peak > 0:
        bump = bump / peak
    vec = np.zeros((3, nx, ny, nz), dtype=_F32)
    vec[2] = bump.astype(_F32)
    return DisplacementField(grid, vec)


def _scene(spec: PhantomSpec, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Analytic scene intensity at continuous HR voxel coordinates."""
    nx, ny, nz = spec.grid_hr.dims
    u = x / (nx - 1)
    v = y / (ny - 1)
    w = z / (nz - 1)

    def smoothstep(t):
        t = np.clip(t, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t)

    # moving features are built in-plane-sharp but z-smooth (about two slices)
    # so trilinear z-resampling of the motion stays faithful on a coarse z grid
    edge = 1.5 / max(nx, ny)
    edge_z = 3.0 / nz

    ax, ay, az = spec.body_semiaxes
    rho = np.sqrt(((u - 0.5) / ax) ** 2 + ((v - 0.5) / ay) ** 2 + ((w - 0.5) / az) ** 2)
    body = smoothstep((1.0 - rho) / (edge * 4) + 0.5)

    # diaphragm interface: abdomen below is brighter than thorax above
    s = smoothstep((w - spec.diaphragm_frac) / edge_z + 0.5)
    tissue = 0.55 * (1.0 - s) + 0.25 * s

    # tumor: sharp in-plane disc profile extruded through a soft z profile
    cx, cy, cz = spec.tumor_center
    rt = np.sqrt((u - cx) ** 2 + (v - cy) ** 2)
    tum_xy = smoothstep((spec.tumor_radius - rt) / (edge * 2) + 0.5)
    tum_z = smoothstep((spec.tumor_half_z - np.abs(w - cz)) / edge_z + 0.5)
    tum = tum_xy * tum_z

    # vessels: near-vertical bright cylinders, soft caps along z
    rng = np.random.default_rng(spec.seed + 101)
    ves = np.zeros_like(u)
    for _ in range(spec.vessel_count):
        p0 = rng.uniform(0.30, 0.70, size=2)
        tilt = rng.normal(0.0, 0.08, size=2)
        z0 = rng.uniform(0.25, 0.55)
        half_len = rng.uniform(0.15, 0.30)
        dx = u - (p0[0] + tilt[0] * (w - z0))
        dy = v - (p0[1] + tilt[1] * (w - z0))
        dist = np.sqrt(dx ** 2 + dy ** 2)
        prof_xy = smoothstep((spec.vessel_radius - dist) / (edge * 1.5) + 0.5)
        prof_z = smoothstep((half_len - np.abs(w - z0)) / edge_z + 0.5)
        ves = np.maximum(ves, prof_xy * prof_z)

    out = 0.05 + body * (tissue - 0.05)
    out = out + body * tum * (spec.tumor_intensity - out)
    out = out + body * ves * (spec.vessel_intensity - out) * (1.0 - tum)
    return np.clip(out, 0.0, 1.0)


def body_mask(spec: PhantomSpec, grid: Grid3) -> np.ndarray:
    """Boolean mask of the body ellipsoid on an arbitrary grid."""
    nx, ny, nz = grid.dims
    u = np.arange(nx) / (nx - 1)
    v = np.arange(ny) / (ny - 1)
    w = np.arange(nz) / (nz - 1)
    ax, ay, az = spec.body_semiaxes
    rho = (((u - 0.5) / ax) ** 2)[:, None, None] + \
          (((v - 0.5) / ay) ** 2)[None, :, None] + \
          (((w - 0.5) / az) ** 2)[None, None, :]
    return rho <= 1.0


def _check_tumor_inside(spec: PhantomSpec) -> None:
    cx, cy, cz = spec.tumor_center
    ax, ay, az = spec.body_semiaxes
    rho = np.sqrt(((cx - 0.5) / ax) ** 2 + ((cy - 0.5) / ay) ** 2 + ((cz - 0.5) / az) ** 2)
    if rho + spec.tumor_radius / min(ax, ay, az) > 1.0:
        raise ValueError("tumor extends outside the body ellipsoid")


def grade_pair(i: int, j: int, K: int) -> int:
    """Phase-range grade 1..4 from circular phase distance."""
    if i == j:
        raise ValueError("phase pair needs i != j")
    d = min(abs(i - j), K - abs(i - j))
    return min(d, 4)


def rotate90_ccw(data: np.ndarray) -> np.ndarray:
    """One 90-degree counter-clockwise in-plane rotation: (x, y) -> (ny-1-y, x)."""
    return np.ascontiguousarray(data.transpose(1, 0, 2)[::-1, :, :])


def augment_rotations(pair: RegistrationPair) -> list[RegistrationPair]:
    """The pair plus its three in-plane right-angle rotations (needs nx == ny)."""
    grid = pair.moving.grid
    nx, ny, _ = grid.dims
    if nx != ny:
        raise ValueError(f"exact in-plane rotation needs nx == ny, got {nx} x {ny}")
    out = [pair]
    m, f = pair.moving.data, pair.fixed.data
    for _ in range(3):
        m, f = rotate90_ccw(m), rotate90_ccw(f)
        out.append(RegistrationPair(Volume(grid, m), Volume(grid, f),
                                    pair.phase_i, pair.phase_j, pair.grade))
    return out


def _blur_downsample(hr: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """In-plane Gaussian blur then align-corners resample to the LR grid."""
    sigma = spec.blur_fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    blurred = ndimage.gaussian_filter(hr.astype(np.float64), sigma=(sigma, sigma, 0.0),
                                      mode="nearest")
    t = ag.Tensor(blurred.astype(_F32)[None])
    return ag.resize_linear(t, spec.grid_lr.dims).data[0]


def generate(spec: PhantomSpec):
    """Build the phantom dataset.

    Returns (lr: Sequence4D, hr: Sequence4D, prior: Volume, gt: GroundTruth).
    The prior is the HR end-of-exhale frame without blur or noise.
    """
    _check_tumor_inside(spec)
    grid_hr = spec.grid_hr
    grid_lr = spec.grid_lr
    nxh, nyh, nzh = grid_hr.dims

    amps = amplitude_profile(spec.K, spec.amplitude_max)
    basis_hr = motion_basis(grid_hr)
    basis_lr = motion_basis(grid_lr)

    bx = np.arange(nxh, dtype=np.float64)[:, None, None] + np.zeros(grid_hr.dims)
    by = np.arange(nyh, dtype=np.float64)[None, :, None] + np.zeros(grid_hr.dims)
    bz = np.arange(nzh, dtype=np.float64)[None, None, :] + np.zeros(grid_hr.dims)

    rng = np.random.default_rng(spec.seed)
    hr_phases, lr_phases = [], []
    fields_hr, fields_lr = [], []
    for k in range(spec.K):
        disp = basis_hr.vectors.astype(np.float64) * amps[k]
        frame = _scene(spec, bx + disp[0], by + disp[1], bz + disp[2]).astype(_F32)
        hr_phases.append(Volume(grid_hr, frame))
        fields_hr.append(DisplacementField(grid_hr, (basis_hr.vectors * _F32(amps[k]))))
        fields_lr.append(DisplacementField(grid_lr, (basis_lr.vectors * _F32(amps[k]))))

        low = _blur_downsample(frame, spec)
        if spec.noise_sigma > 0:
            low = low + rng.normal(0.0, spec.noise_sigma, low.shape)
        lr_phases.append(Volume(grid_lr, np.clip(low, 0.0, 1.0).astype(_F32)))

    prior = hr_phases[0]
    gt = GroundTruth(tuple(fields_lr), tuple(fields_hr), tuple(amps))
    return Sequence4D(lr_phases), Sequence4D(hr_phases), prior, gt
