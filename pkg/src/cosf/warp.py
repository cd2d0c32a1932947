"""Spatial transformation: trilinear warping, DVF resampling and algebra.

Pulling convention throughout: ``out(x) = source(x + phi(x))``, with samples
outside the grid clamped to the nearest border voxel. The warp is
differentiable with respect to both the source values and the field
components, so it serves as the STN for all three network stages.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .core import DisplacementField, Grid3, Volume

_F32 = np.float32


def _base_grid(dims) -> np.ndarray:
    """Identity sample positions, shape (3, nx, ny, nz), float32."""
    axes = [np.arange(n, dtype=_F32) for n in dims]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz])


def _warp_arrays(src: np.ndarray, phi: np.ndarray):
    """Trilinear gather of (C, nx, ny, nz) source at x + phi.

    Returns (out, ctx) where ctx carries what the backward pass needs.
    """
    dims = src.shape[1:]
    if phi.shape != (3,) + dims:
        raise ValueError(f"field shape {phi.shape} does not match source grid {dims}")
    coords = _base_grid(dims) + phi
    nvox = int(np.prod(dims))
    srcf = src.reshape(src.shape[0], nvox)

    idx0, idx1, fracs, inside = [], [], [], []
    for ax, n in enumerate(dims):
        c = np.clip(coords[ax], 0.0, _F32(n - 1))
        i0 = np.minimum(np.floor(c).astype(np.int64), n - 2)
        fracs.append((c - i0).astype(_F32))
        idx0.append(i0)
        idx1.append(i0 + 1)
        inside.append((coords[ax] > 0.0) & (coords[ax] < _F32(n - 1)))

    sy = dims[2]          # flat strides for (x, y, z) C-order indexing
    sx = dims[1] * dims[2]

    def flat(ix, iy, iz):
        return (ix * sx + iy * sy + iz).reshape(-1)

    fx, fy, fz = fracs
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)

    out = np.zeros_like(src)
    corner_flat = {}
    for ax_ in (0, 1):
        for ay in (0, 1):
            for az in (0, 1):
                fi = flat((idx0, idx1)[ax_][0], (idx0, idx1)[ay][1], (idx0, idx1)[az][2])
                corner_flat[(ax_, ay, az)] = fi
                w = (wx[ax_] * wy[ay] * wz[az]).reshape(-1)
                out += (srcf[:, fi] * w).reshape(src.shape)

    ctx = dict(dims=dims, srcf=srcf, corner_flat=corner_flat,
               wx=wx, wy=wy, wz=wz, inside=inside, nvox=nvox)
    return out, ctx


def _warp_backward(g: np.ndarray, ctx, need_src: bool, need_phi: bool):
    dims = ctx["dims"]
    nvox = ctx["nvox"]
    c = g.shape[0]
    gf = g.reshape(c, nvox)
    wx, wy, wz = ctx["wx"], ctx["wy"], ctx["wz"]
    srcf = ctx["srcf"]

    dsrc = np.zeros((c, nvox), dtype=_F32) if need_src else None
    dphi = np.zeros((3,) + dims, dtype=_F32) if need_phi else None

    for (ax_, ay, az), fi in ctx["corner_flat"].items():
        w = (wx[ax_] * wy[ay] * wz[az]).reshape(-1)
        if need_src:
            for ch in range(c):
                dsrc[ch] += np.bincount(fi, weights=gf[ch] * w, minlength=nvox).astype(_F32)
        if need_phi:
            vals = srcf[:, fi]                     # (C, nvox)
            gv = (gf * vals).sum(axis=0).reshape(dims)
            sx_ = _F32(1.0) if ax_ else _F32(-1.0)
            sy_ = _F32(1.0) if ay else _F32(-1.0)
            sz_ = _F32(1.0) if az else _F32(-1.0)
            dphi[0] += gv * sx_ * (wy[ay] * wz[az])
            dphi[1] += gv * sy_ * (wx[ax_] * wz[az])
            dphi[2] += gv * sz_ * (wx[ax_] * wy[ay])

    if need_phi:
        for ax in range(3):
            dphi[ax] *= ctx["inside"][ax]
    return dsrc, dphi


def warp_channels(src: Tensor, phi: Tensor) -> Tensor:
    """Differentiable warp of a (C, nx, ny, nz) tensor by a (3, nx, ny, nz) field."""
    out, ctx = _warp_arrays(src.data, phi.data)

    def bwd(g):
        dsrc, dphi = _warp_backward(g, ctx, src.requires_grad, phi.requires_grad)
        if src.requires_grad:
            src._accum(dsrc.reshape(src.data.shape))
        if phi.requires_grad:
            phi._accum(dphi)

    return ag._make_node(out, (src, phi), bwd)


def warp(source, phi, boundary: str = "clamp"):
    """Warp a Volume (or channel Tensor) through a displacement field.

    ``boundary`` only supports clamp (replicate-edge) sampling.
    """
    if boundary != "clamp":
        raise ValueError(f"unsupported boundary mode {boundary!r}")
    if isinstance(source, Tensor) or isinstance(phi, Tensor):
        src_t = source if isinstance(source, Tensor) else Tensor(source.data[None])
        phi_t = phi if isinstance(phi, Tensor) else Tensor(phi.vectors)
        return warp_channels(src_t, phi_t)
    if source.grid != phi.grid:
        raise ValueError("source and field must share one grid")
    out, _ = _warp_arrays(source.data[None], phi.vectors)
    return Volume(source.grid, out[0])


def upsample_dvf(phi: DisplacementField, target: Grid3) -> DisplacementField:
    """Resample a field to a finer grid, rescaling voxel-unit displacements.

    Components are trilinearly interpolated (align-corners) and each is
    multiplied by (target_dim - 1)/(source_dim - 1) for its axis so the
    physical displacement is preserved.
    """
    src_dims = phi.grid.dims
    if any(t < s for t, s in zip(target.dims, src_dims)):
        raise ValueError(f"downsampling request: {src_dims} -> {target.dims}")
    out = ag.resize_linear(Tensor(phi.vectors), target.dims).data.copy()
    for ax in range(3):
        out[ax] *= _F32((target.dims[ax] - 1) / (src_dims[ax] - 1))
    return DisplacementField(target, out)


def upsample_dvf_t(phi: Tensor, src_dims, target_dims) -> Tensor:
    """Tape version of :func:`upsample_dvf` on a (3, ...) tensor."""
    if any(t < s for t, s in zip(target_dims, src_dims)):
        raise ValueError(f"downsampling request: {src_dims} -> {target_dims}")
    resized = ag.resize_linear(phi, tuple(target_dims))
    parts = []
    for ax in range(3):
        scale = (target_dims[ax] - 1) / (src_dims[ax] - 1)
        parts.append(ag.mul(ag.narrow(resized, 0, ax, 1), float(scale)))
    return ag.concat(parts, axis=0)


def compose(phi_a: DisplacementField, phi_b: DisplacementField) -> DisplacementField:
    """(phi_a o phi_b)(x) = phi_b(x) + sample(phi_a, x + phi_b(x))."""
    if phi_a.grid != phi_b.grid:
        raise ValueError("compose needs both fields on one grid")
    sampled, _ = _warp_arrays(phi_a.vectors, phi_b.vectors)
    return DisplacementField(phi_a.grid, phi_b.vectors + sampled)


def residual_update(v: DisplacementField, phi_tilde: DisplacementField) -> DisplacementField:
    """phi_star = v + phi_tilde, exact componentwise sum."""
    if v.grid != phi_tilde.grid:
        raise ValueError("residual_update needs both fields on one grid")
    return DisplacementField(v.grid, v.vectors + phi_tilde.vectors)


def dvf_magnitude(phi: DisplacementField) -> Volume:
    """Per-voxel Euclidean norm of the field, as a Volume for heatmap export."""
    mag = np.sqrt((phi.vectors.astype(np.float64) ** 2).sum(axis=0))
    return Volume(phi.grid, mag.astype(_F32))


def quantize_field(vec: np.ndarray, bits: int = 18) -> np.ndarray:
    """Snap components to a 2**-bits voxel lattice.

    Fields snapped this way ( |v| < 2**(23-bits) ) add and subtract exactly
    in float32, which closes the residual algebra phi_star = v + phi_tilde
    bitwise in both directions.
    """
    scale = float(2 ** bits)
    return (np.round(vec.astype(np.float64) * scale) / scale).astype(_F32)
