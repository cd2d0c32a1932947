"""Runtime invariant suite: gradient checks, warp identities, loss extrema,
and metric sanity. Used by the `selftest` CLI subcommand and reused by the
test suite so both run the same oracles.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import losses, metrics
from .autograd import Tensor
from .core import Grid3, Volume, DisplacementField, normalize_intensity
from .warp import _warp_arrays, residual_update, warp_channels

_F32 = np.float32


def gradcheck(f, xs, h_dir: float = 1e-3, h_coord: float = 1e-2,
              n_coords: int = 5, rng=None) -> float:
    """Worst relative error between tape gradients and central differences.

    Two probe families, both dotted against the effective (float32-rounded)
    perturbation: one step along each input's analytic gradient direction,
    plus single-coordinate probes at that input's largest-gradient entries.
    Tolerances are sized for a float32 forward pass; callers assert the
    returned value < 1e-3.
    """
    rng = rng or np.random.default_rng(0)
    with ag.Tape():
        loss = f(*xs)
        ag.backward(loss)
    scale = max(1.0, abs(loss.item()))
    grads = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs]
    for x in xs:
        x.grad = None

    def central(k, pert):
        old = xs[k].data.copy()
        xs[k].data = (old.astype(np.float64) + pert).astype(_F32)
        fp = f(*xs).item()
        eff_p = xs[k].data.astype(np.float64) - old.astype(np.float64)
        xs[k].data = (old.astype(np.float64) - pert).astype(_F32)
        fm = f(*xs).item()
        eff_m = old.astype(np.float64) - xs[k].data.astype(np.float64)
        xs[k].data = old
        return fp, fm, (eff_p + eff_m) / 2.0

    worst = 0.0
    for k, g in enumerate(grads):
        if not xs[k].requires_grad:
            continue
        g64 = g.astype(np.float64)
        gnorm = float(np.sqrt((g64 ** 2).sum()))
        if gnorm > 1e-6 * scale:
            fp, fm, eff = central(k, h_dir * g64 / gnorm)
            fd = (fp - fm) / (2 * h_dir)
            an = float((g64 * eff).sum()) / h_dir
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        flat = np.abs(g64).reshape(-1)
        gmax = flat.max()
        if gmax <= 1e-6 * scale:
            continue  # genuinely negligible gradient; direction probe covered it
        floor = 0.02 * gmax
        for i in np.argsort(flat)[::-1][:n_coords]:
            pert = np.zeros(g.size)
            pert[i] = h_coord
            fp, fm, eff = central(k, pert.reshape(g.shape))
            hh = eff.reshape(-1)[i]
            if hh == 0:
                continue
            fd = (fp - fm) / (2 * hh)
            an = float(g64.reshape(-1)[i])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst


def _rand_t(rng, shape, lo=0.0, hi=1.0, grad=True):
    return Tensor(rng.uniform(lo, hi, shape).astype(_F32), requires_grad=grad)


def run_selftest(verbose_print=print) -> bool:
    """Full invariant suite; prints one pass/fail line per check."""
    rng = np.random.default_rng(0)
    results = []

    def check(name, ok, detail=""):
        results.append(ok)
        verbose_print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))

    # --- warp identities
    v = rng.uniform(0, 1, (1, 8, 8, 8)).astype(_F32)
    out, _ = _warp_arrays(v, np.zeros((3, 8, 8, 8), _F32))
    check("warp identity is exact", np.array_equal(out, v))

    imp = np.zeros((1, 8, 8, 8), _F32)
    imp[0, 5, 4, 4] = 1.0
    phi = np.zeros((3, 8, 8, 8), _F32)
    phi[0] = 1.0
    out, _ = _warp_arrays(imp, phi)
    expect = np.zeros_like(imp)
    expect[0, 4, 4, 4] = 1.0
    check("warp integer translation matches direct indexing",
          np.array_equal(out[:, :7], expect[:, :7]))

    g = Grid3((6, 5, 4))
    a = DisplacementField(g, rng.normal(0, 1, (3,) + g.dims).astype(_F32))
    b = DisplacementField(g, rng.normal(0, 1, (3,) + g.dims).astype(_F32))
    check("residual_update algebra exact",
          np.array_equal(residual_update(a, b).vectors, a.vectors + b.vectors))

    # --- gradient spot checks
    src = _rand_t(rng, (1, 6, 6, 6))
    phi_t = Tensor((rng.uniform(-0.3, 0.3, (3, 6, 6, 6)) + 0.4).astype(_F32),
                   requires_grad=True)
    err = gradcheck(lambda s, p: ag.mean(ag.pow2(warp_channels(s, p))), [src, phi_t], rng=rng)
    check("warp gradients vs finite differences", err < 1e-3, f"rel {err:.2e}")

    x = Tensor(rng.normal(0, 1, (2, 5, 5, 5)).astype(_F32), requires_grad=True)
    w = Tensor(rng.normal(0, 0.3, (3, 2, 3, 3, 3)).astype(_F32), requires_grad=True)
    bb = Tensor(rng.normal(0, 0.3, (3,)).astype(_F32), requires_grad=True)
    err = gradcheck(lambda x, w, b: ag.mean(ag.pow2(ag.conv3d(x, w, b, 2, 1))),
                    [x, w, bb], rng=rng)
    check("conv3d gradients vs finite differences", err < 1e-3, f"rel {err:.2e}")

    na = _rand_t(rng, (8, 8, 8))
    nb = _rand_t(rng, (8, 8, 8))
    err = gradcheck(lambda a, b: losses.ncc(a, b, 5), [na, nb], rng=rng)
    check("ncc gradients vs finite differences", err < 1e-3, f"rel {err:.2e}")

    # --- loss extrema
    vol = rng.uniform(0, 1, (12, 12, 10)).astype(_F32)
    zero = Tensor(np.zeros((3, 12, 12, 10), _F32))
    cl = losses.coarse_loss(Tensor(vol), Tensor(vol), zero, zero).item()
    check("coarse loss at identity on equal images = -2", abs(cl + 2.0) < 1e-4,
          f"{cl:.6f}")
    fl = losses.fine_loss(Tensor(vol), Tensor(vol), Tensor(vol),
                          zero, zero).item()
    check("fine loss at identity on equal images = -1", abs(fl + 1.0) < 1e-4,
          f"{fl:.6f}")
    const = Tensor(np.full((3, 6, 6, 6), 0.7, _F32))
    check("smoothness of constant field = 0", losses.smooth(const).item() == 0.0)
    img = Tensor(rng.uniform(0, 1, (2, 1, 48, 48)).astype(_F32))
    ms = losses.ms_ssim(img, img).item()
    check("ms_ssim(x, x) = 1", ms == 1.0, f"{ms}")

    # --- metric sanity
    x1 = rng.uniform(0, 1, (16, 16, 16)).astype(_F32)
    check("rmse(x, x) = 0", metrics.rmse(x1, x1) == 0.0)
    p = metrics.psnr(np.zeros(100), np.full(100, 0.1))
    check("psnr at mse 0.01 = 20 dB", abs(p - 20.0) < 1e-9, f"{p:.12f}")
    n2 = metrics.nmi(x1, x1)
    check("nmi(x, x) = 2", abs(n2 - 2.0) < 1e-9, f"{n2:.12f}")

    # --- normalization
    g2 = Grid3((8, 8, 8))
    nv = normalize_intensity(Volume(g2, rng.uniform(2, 4, (8, 8, 8))))
    check("normalize hits [0, 1] and is idempotent",
          nv.data.min() == 0.0 and nv.data.max() == 1.0
          and np.array_equal(normalize_intensity(nv).data, nv.data))

    return all(results)
