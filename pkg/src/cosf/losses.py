"""Training objectives: registration similarity/smoothness, adversarial SR
losses, and the dual-similarity fine-stage loss.

All functions build tape graphs from :mod:`cosf.autograd` primitives, so
they are differentiable end-to-end and usable both for training and (off
tape) as plain evaluators.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .warp import warp_channels

NCC_EPS = 1e-5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# first three of the standard five-scale weights, renormalized to sum 1
MSSSIM_WEIGHTS_RAW = (0.0448, 0.2856, 0.3001)


def ncc(a: Tensor, b: Tensor, window: int = 9) -> Tensor:
    """Mean local windowed Pearson correlation over all voxels, in [-1, 1].

    Border windows are truncated but remain exact Pearson over their
    population; the denominator is guarded by NCC_EPS.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"ncc shape mismatch {a.data.shape} vs {b.data.shape}")
    if window % 2 != 1:
        raise ValueError("ncc window must be odd")
    n = Tensor(ag.local_count(a.data.shape, window))
    sa = ag.local_sum(a, window)
    sb = ag.local_sum(b, window)
    saa = ag.local_sum(ag.mul(a, a), window)
    sbb = ag.local_sum(ag.mul(b, b), window)
    sab = ag.local_sum(ag.mul(a, b), window)
    cross = ag.sub(sab, ag.div(ag.mul(sa, sb), n))
    var_a = ag.clamp_min(ag.sub(saa, ag.div(ag.mul(sa, sa), n)), 0.0)
    var_b = ag.clamp_min(ag.sub(sbb, ag.div(ag.mul(sb, sb), n)), 0.0)
    cc = ag.div(cross, ag.sqrt(ag.add(ag.mul(var_a, var_b), NCC_EPS)))
    return ag.mean(cc)


def smooth(phi: Tensor) -> Tensor:
    """Diffusion regularizer: mean squared forward-difference gradient.

    The mean runs over every computed difference (3 components x 3 axes,
    interior positions only), so a constant field scores exactly 0 and
    scaling the field by c scales the loss by c^2.
    """
    if phi.data.ndim != 4 or phi.data.shape[0] != 3:
        raise ValueError("smooth expects a (3, nx, ny, nz) field")
    total = None
    count = 0
    for ax in (1, 2, 3):
        n = phi.data.shape[ax]
        d = ag.sub(ag.narrow(phi, ax, 1, n - 1), ag.narrow(phi, ax, 0, n - 1))
        count += d.data.size
        term = ag.tsum(ag.pow2(d))
        total = term if total is None else ag.add(total, term)
    return ag.mul(total, 1.0 / count)


def inverse_consistency(m2f: Tensor, f2m: Tensor) -> Tensor:
    """Mean squared magnitude of the round trip phi_m2f o phi_f2m.

    Diagnostic by default (weight 0 in the coarse loss); differentiable so
    it can be enabled as a penalty.
    """
    round_trip = ag.add(f2m, warp_channels(m2f, f2m))
    return ag.mean(ag.pow2(round_trip))


def coarse_loss(m: Tensor, f: Tensor, phi_m2f: Tensor, phi_f2m: Tensor,
                lam1: float = 4.0, window: int = 9,
                ic_weight: float = 0.0) -> Tensor:
    """Bidirectional similarity plus smoothness for the coarse stage.

    -ncc(f, warp(m, phi_m2f)) - ncc(m, warp(f, phi_f2m))
    + lam1 * (smooth(phi_m2f) + smooth(phi_f2m))
    with an optional (default-off) inverse-consistency penalty.
    """
    m_w = ag.reshape(warp_channels(ag.reshape(m, (1,) + m.data.shape), phi_m2f), m.data.shape)
    f_w = ag.reshape(warp_channels(ag.reshape(f, (1,) + f.data.shape), phi_f2m), f.data.shape)
    loss = ag.add(ag.neg(ncc(f, m_w, window)), ag.neg(ncc(m, f_w, window)))
    loss = ag.add(loss, ag.mul(ag.add(smooth(phi_m2f), smooth(phi_f2m)), lam1))
    if ic_weight > 0:
        loss = ag.add(loss, ag.mul(inverse_consistency(phi_m2f, phi_f2m), ic_weight))
    return loss


def _gaussian_kernel2d(window: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = window // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k1 = np.exp(-(x ** 2) / (2 * sigma ** 2))
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    return k2.reshape(1, 1, window, window).astype(np.float32)


_SSIM_KERNEL = _gaussian_kernel2d()
_SSIM_BIAS = np.zeros(1, dtype=np.float32)


def _ssim_parts(a: Tensor, b: Tensor, data_range: float = 1.0):
    """Mean SSIM and mean contrast-structure term of (N,1,H,W) slices."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"ssim shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.ndim != 4 or a.data.shape[1] != 1:
        raise ValueError("ssim expects (N, 1, H, W) slabs")
    win = _SSIM_KERNEL.shape[-1]
    if min(a.data.shape[2:]) <= win // 2:
        raise ValueError(f"image {a.data.shape[2:]} too small for {win}x{win} window")
    k = Tensor(_SSIM_KERNEL)
    kb = Tensor(_SSIM_BIAS)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def blur(t):
        return ag.conv2d(ag.reflect_pad2d(t, win // 2), k, kb, stride=1, pad_=0)

    mu_a = blur(a)
    mu_b = blur(b)
    mu_aa = ag.mul(mu_a, mu_a)
    mu_bb = ag.mul(mu_b, mu_b)
    mu_ab = ag.mul(mu_a, mu_b)
    var_a = ag.sub(blur(ag.mul(a, a)), mu_aa)
    var_b = ag.sub(blur(ag.mul(b, b)), mu_bb)
    cov = ag.sub(blur(ag.mul(a, b)), mu_ab)

    lum = ag.div(ag.add(ag.mul(mu_ab, 2.0), c1), ag.add(ag.add(mu_aa, mu_bb), c1))
    cs = ag.div(ag.add(ag.mul(cov, 2.0), c2), ag.add(ag.add(var_a, var_b), c2))
    return ag.mean(ag.mul(lum, cs)), ag.mean(cs)


def ssim(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    full, _ = _ssim_parts(a, b, data_range)
    return full


def ms_ssim(a: Tensor, b: Tensor, scales: int = 3, data_range: float = 1.0) -> Tensor:
    """Multi-scale SSIM over dyadic scales, weights renormalized from the
    standard five-scale set. Exactly 1 for identical inputs."""
    w = np.array(MSSSIM_WEIGHTS_RAW[:scales], dtype=np.float64)
    w /= w.sum()
    min_dim = min(a.data.shape[2:])
    if min_dim // (2 ** (scales - 1)) <= 5:
        raise ValueError(f"image {a.data.shape[2:]} too small for {scales} scales")
    result = None
    for s in range(scales):
        full, cs = _ssim_parts(a, b, data_range)
        term = full if s == scales - 1 else cs
        factor = ag.powc(ag.clamp_min(term, 1e-4), float(w[s]))
        result = factor if result is None else ag.mul(result, factor)
        if s < scales - 1:
            a = ag.avgpool2x2d(a)
            b = ag.avgpool2x2d(b)
    return result


def bce_logits(logits: Tensor, target_is_one: bool) -> Tensor:
    """Mean binary cross-entropy of logits against a constant 0/1 target."""
    return ag.mean(ag.softplus(ag.neg(logits) if target_is_one else logits))


def gan_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Conditional-GAN objectives from discriminator logit maps.

    d_loss pushes real->1 and fake->0; g_adv pushes fake->1. Per-patch
    BCEs are averaged. The caller controls which graph each logit tensor
    is attached to (detach the fake branch for the D step).
    """
    d_loss = ag.add(bce_logits(d_real, True), bce_logits(d_fake, False))
    g_adv = bce_logits(d_fake, True)
    return d_loss, g_adv


def sr_generator_loss(fake: Tensor, target: Tensor, d_fake_logits: Tensor,
                      lam2: float = 10.0, lam3: float = 10.0) -> Tensor:
    """g_adv + lam2 * L1 + lam3 * (1 - MS-SSIM) for a batch of slices."""
    g_adv = bce_logits(d_fake_logits, True)
    l1 = ag.mean(ag.absval(ag.sub(target, fake)))
    ms = ms_ssim(target, fake)
    return ag.add(ag.add(g_adv, ag.mul(l1, lam2)), ag.mul(ag.sub(1.0, ms), lam3))


def sr_loss(generator, discriminator, batch, lam2: float = 10.0, lam3: float = 10.0):
    """Full SR objective for one batch: returns (g_total, d_loss).

    ``batch`` is (lr_stack, hr_target) tensors of shapes (N,5,H,W) and
    (N,1,2H,2W). The discriminator conditions on the upsampled input
    stack; its d_loss sees the generator output detached.
    """
    lr_stack, hr_target = batch
    fake = generator(lr_stack)
    cond = ag.resize_linear(lr_stack, tuple(hr_target.data.shape[2:]))
    d_real = discriminator(ag.concat([cond, hr_target], axis=1))
    d_fake_for_d = discriminator(ag.concat([cond.detach(), fake.detach()], axis=1))
    d_fake_for_g = discriminator(ag.concat([cond, fake], axis=1))
    d_loss, _ = gan_losses(d_real, d_fake_for_d)
    g_total = sr_generator_loss(fake, hr_target, d_fake_for_g, lam2, lam3)
    return g_total, d_loss


def fine_loss(f: Tensor, m: Tensor, p_aligned: Tensor | None, phi_star: Tensor,
              phi_tilde: Tensor, alpha: float = 0.35, lam4: float = 5.0,
              window: int = 9) -> Tensor:
    """Dual-similarity fine objective on the HR grid.

    -alpha * ncc(f, warp(m, phi_star)) - (1-alpha) * ncc(f, warp(p, phi_star))
    + lam4 * smooth(phi_star). With no prior (p_aligned=None) the prior
    similarity term is dropped and the image term takes full weight.
    """
    del phi_tilde  # initial guess; frozen w.r.t. this stage's parameters
    m_w = ag.reshape(warp_channels(ag.reshape(m, (1,) + m.data.shape), phi_star), m.data.shape)
    if p_aligned is None:
        loss = ag.neg(ncc(f, m_w, window))
    else:
        p_w = ag.reshape(
            warp_channels(ag.reshape(p_aligned, (1,) + p_aligned.data.shape), phi_star),
            p_aligned.data.shape)
        loss = ag.add(ag.mul(ag.neg(ncc(f, m_w, window)), alpha),
                      ag.mul(ag.neg(ncc(f, p_w, window)), 1.0 - alpha))
    return ag.add(loss, ag.mul(smooth(phi_star), lam4))
