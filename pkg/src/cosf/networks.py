"""The three submodels: coarse registration U-Net, 2.5D conditional-GAN
super-resolver, and the dual-encoder fine registration network.

Every field-emitting head is zero-initialized, so untrained registration
nets start at the identity warp and the untrained generator starts at
exact bilinear upsampling of the center slice. Channel widths and block
layout are constructor arguments; the defaults are the shipped
configuration.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .core import Grid3, PhiPair, DisplacementField, Volume
from .warp import warp_channels

_F32 = np.float32


class Conv3d:
    def __init__(self, name, cin, cout, rng, k=3, stride=1, pad=1, zero_init=False):
        self.name = name
        self.stride = stride
        self.pad = pad
        if zero_init:
            w = np.zeros((cout, cin, k, k, k), dtype=_F32)
        else:
            w = ag._he_uniform(rng, (cout, cin, k, k, k), cin * k ** 3)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=_F32), requires_grad=True)

    def __call__(self, x):
        return ag.conv3d(x, self.w, self.b, stride=self.stride, pad_=self.pad)

    def params(self):
        return [(self.name + ".w", self.w), (self.name + ".b", self.b)]


class Conv2d:
    def __init__(self, name, cin, cout, rng, k=3, stride=1, pad=1, zero_init=False):
        self.name = name
        self.stride = stride
        self.pad = pad
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=_F32)
        else:
            w = ag._he_uniform(rng, (cout, cin, k, k), cin * k ** 2)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=_F32), requires_grad=True)

    def __call__(self, x):
        return ag.conv2d(x, self.w, self.b, stride=self.stride, pad_=self.pad)

    def params(self):
        return [(self.name + ".w", self.w), (self.name + ".b", self.b)]


class InstanceNorm2d:
    def __init__(self, name, channels):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=_F32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=_F32), requires_grad=True)

    def __call__(self, x):
        return ag.instance_norm2d(x, self.gamma, self.beta)

    def params(self):
        return [(self.name + ".g", self.gamma), (self.name + ".b", self.beta)]


def _lrelu(x):
    return ag.leaky_relu(x, 0.2)


def _collect(*layers):
    out = []
    for layer in layers:
        out.extend(layer.params())
    return out


class _ParamNet:
    """Shared checkpoint plumbing for the three models."""

    kind = "net"

    def named_params(self):
        return self._params

    def save(self, path):
        ag.save_params(path, self.kind, self._params)

    def load(self, path):
        kind, arrays = ag.load_params(path)
        if kind != self.kind:
            raise ValueError(f"checkpoint kind {kind!r} does not match model {self.kind!r}")
        have = dict(self._params)
        if set(arrays) != set(have):
            raise ValueError("checkpoint parameter names do not match the model")
        for name, arr in arrays.items():
            if have[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{have[name].data.shape} vs {arr.shape}")
            have[name].data = arr.astype(_F32)
        return self


def _pad_to_multiple(x: Tensor, mult: int) -> tuple[Tensor, tuple[int, int, int]]:
    dims = x.data.shape[1:]
    extra = tuple((-d) % mult for d in dims)
    if any(extra):
        x = ag.pad(x, ((0, 0),) + tuple((0, e) for e in extra))
    return x, extra


class CoarseDirNet(_ParamNet):
    """U-Net emitting a bidirectional LR displacement pair (6 channels)."""

    kind = "coarse_dir"

    def __init__(self, channels=(16, 32, 32, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        c0, c1, c2, c3 = channels
        self.enc = [
            Conv3d("enc0", 2, c0, rng, stride=2),
            Conv3d("enc1", c0, c1, rng, stride=2),
            Conv3d("enc2", c1, c2, rng, stride=2),
            Conv3d("enc3", c2, c3, rng, stride=2),
        ]
        self.bottleneck = Conv3d("bott", c3, c3, rng)
        self.dec = [
            Conv3d("dec3", c3 + c2, c2, rng),
            Conv3d("dec2", c2 + c1, c1, rng),
            Conv3d("dec1", c1 + c0, c0, rng),
            Conv3d("dec0", c0 + 2, c0, rng),
        ]
        self.head = Conv3d("head", c0, 6, rng, zero_init=True)
        self._params = _collect(*self.enc, self.bottleneck, *self.dec, self.head)

    def __call__(self, f: Tensor, m: Tensor) -> tuple[Tensor, Tensor]:
        """f, m: (1, X, Y, Z) tensors on one grid -> (phi_m2f, phi_f2m)."""
        x = ag.concat([f, m], axis=0)
        dims = x.data.shape[1:]
        x, _ = _pad_to_multiple(x, 16)
        feats = [x]
        h = x
        for conv in self.enc:
            h = _lrelu(conv(h))
            feats.append(h)
        h = _lrelu(self.bottleneck(h))
        for conv, skip in zip(self.dec, feats[-2::-1]):
            h = ag.upsample2x_nearest3d(h)
            h = _lrelu(conv(ag.concat([h, skip], axis=0)))
        out = self.head(h)
        out = ag.narrow(ag.narrow(ag.narrow(out, 1, 0, dims[0]), 2, 0, dims[1]), 3, 0, dims[2])
        return ag.narrow(out, 0, 0, 3), ag.narrow(out, 0, 3, 3)


def coarse_forward(net: CoarseDirNet, f: Volume, m: Volume) -> PhiPair:
    """Inference wrapper producing a PhiPair on the LR grid."""
    if f.grid != m.grid:
        raise ValueError("fixed and moving volumes must share one grid")
    m2f, f2m = net(Tensor(f.data[None]), Tensor(m.data[None]))
    return PhiPair(DisplacementField(f.grid, m2f.data),
                   DisplacementField(f.grid, f2m.data))


class SrGenerator(_ParamNet):
    """2.5D slice super-resolver: 5 LR slices in, one 2x HR center slice out.

    Output is bilinear upsampling of the center slice plus a learned,
    zero-initialized residual; training consumes the raw output while the
    volume-level helpers clamp to [0, 1].
    """

    kind = "sr_generator"

    def __init__(self, base: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        b = base
        self.blocks = [
            (Conv2d("g_e0", 5, b, rng, stride=1), InstanceNorm2d("g_n0", b)),
            (Conv2d("g_e1", b, 2 * b, rng, stride=2), InstanceNorm2d("g_n1", 2 * b)),
            (Conv2d("g_e2", 2 * b, 2 * b, rng, stride=2), InstanceNorm2d("g_n2", 2 * b)),
            (Conv2d("g_d0", 2 * b, 2 * b, rng), InstanceNorm2d("g_n3", 2 * b)),
            (Conv2d("g_d1", 2 * b, b, rng), InstanceNorm2d("g_n4", b)),
            (Conv2d("g_d2", b, b // 2, rng), InstanceNorm2d("g_n5", b // 2)),
            (Conv2d("g_f", b // 2, b // 2, rng), InstanceNorm2d("g_n6", b // 2)),
        ]
        self.head = Conv2d("g_head", b // 2, 1, rng, zero_init=True)
        layers = []
        for conv, norm in self.blocks:
            layers.extend((conv, norm))
        self._params = _collect(*layers, self.head)

    def __call__(self, stack: Tensor) -> Tensor:
        """stack: (N, 5, H, W) -> (N, 1, 2H, 2W), unclamped."""
        if stack.data.shape[1] != 5:
            raise ValueError(f"generator expects 5 input slices, got {stack.data.shape[1]}")
        h, w = stack.data.shape[2:]
        base = ag.resize_linear(ag.narrow(stack, 1, 2, 1), (2 * h, 2 * w))
        x = stack
        for i, (conv, norm) in enumerate(self.blocks):
            x = ag.relu(norm(conv(x)))
            if i in (3, 4, 5):  # decoder blocks upsample back past the input size
                x = ag.upsample2x_nearest2d(x)
        return ag.add(base, self.head(x))


class SrDiscriminator(_ParamNet):
    """Conditional patch discriminator: 5 upsampled LR slices + candidate."""

    kind = "sr_discriminator"

    def __init__(self, base: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed + 17)
        widths = [6, base, 2 * base, 2 * base, 2 * base, 2 * base]
        self.blocks = []
        for i in range(5):
            self.blocks.append((Conv2d(f"d_c{i}", widths[i], widths[i + 1], rng, stride=2),
                                InstanceNorm2d(f"d_n{i}", widths[i + 1])))
        self.head = Conv2d("d_head", widths[-1], 1, rng)
        layers = []
        for conv, norm in self.blocks:
            layers.extend((conv, norm))
        self._params = _collect(*layers, self.head)

    def __call__(self, x: Tensor) -> Tensor:
        """x: (N, 6, 2H, 2W) condition+candidate -> patch logit map."""
        for conv, norm in self.blocks:
            x = _lrelu(norm(conv(x)))
        return self.head(x)


def _clamp01(x: Tensor) -> Tensor:
    return ag.neg(ag.clamp_min(ag.neg(ag.clamp_min(x, 0.0)), -1.0))


def make_stack_indices(nz: int) -> np.ndarray:
    """z indices of the 5-slice neighborhoods, replicate-padded at the ends."""
    offs = np.arange(-2, 3)
    return np.clip(np.arange(nz)[:, None] + offs[None, :], 0, nz - 1)


def sr_forward_slice(gen: SrGenerator, stack5: np.ndarray) -> np.ndarray:
    """One (5, H, W) stack -> (2H, 2W) center slice, clamped to [0, 1]."""
    if stack5.ndim != 3 or stack5.shape[0] != 5:
        raise ValueError("expected a (5, H, W) slice stack")
    out = gen(Tensor(stack5[None]))
    return np.clip(out.data[0, 0], 0.0, 1.0)


def sr_enhance_volume_t(gen: SrGenerator, vol: Tensor) -> Tensor:
    """Differentiable slice-by-slice enhancement of a (1, X, Y, Z) tensor.

    Returns (1, 2X, 2Y, Z), clamped to [0, 1].
    """
    nz = vol.data.shape[3]
    stacks = ag.concat([ag.take_axis(vol, idx, 3)
                        for idx in make_stack_indices(nz).T], axis=0)  # (5, X, Y, Z)
    stacks = ag.transpose(stacks, (3, 0, 1, 2))                        # (Z, 5, X, Y)
    out = gen(stacks)                                                  # (Z, 1, 2X, 2Y)
    return _clamp01(ag.transpose(out, (1, 2, 3, 0)))


def sr_enhance_volume(gen: SrGenerator, v: Volume) -> Volume:
    """Volume-level enhancement: in-plane 2x, spacing halved, z unchanged."""
    out = sr_enhance_volume_t(gen, Tensor(v.data[None]))
    nx, ny, nz = v.grid.dims
    sx, sy, sz = v.grid.spacing
    grid = Grid3((2 * nx, 2 * ny, nz), (sx / 2, sy / 2, sz))
    return Volume(grid, out.data[0])


class FineDirNet(_ParamNet):
    """Dual-encoder refinement net emitting a 3-channel residual field."""

    kind = "fine_dir"

    def __init__(self, channels=(16, 32, 32, 32), seed: int = 0):
        rng = np.random.default_rng(seed + 31)
        c0, c1, c2, c3 = channels
        p0, p1, p2, p3 = (max(1, c // 2) for c in channels)
        self.reg_enc = [
            Conv3d("reg0", 2, c0, rng, stride=2),
            Conv3d("reg1", c0, c1, rng, stride=2),
            Conv3d("reg2", c1, c2, rng, stride=2),
            Conv3d("reg3", c2, c3, rng, stride=2),
        ]
        self.prior_enc = [
            Conv3d("pri0", 1, p0, rng, stride=2),
            Conv3d("pri1", p0, p1, rng, stride=2),
            Conv3d("pri2", p1, p2, rng, stride=2),
            Conv3d("pri3", p2, p3, rng, stride=2),
        ]
        self.bottleneck = Conv3d("bott", c3 + p3, c3, rng)
        self.dec = [
            Conv3d("dec3", c3 + c2 + p2, c2, rng),
            Conv3d("dec2", c2 + c1 + p1, c1, rng),
            Conv3d("dec1", c1 + c0 + p0, c0, rng),
            Conv3d("dec0", c0 + 2 + 1, c0, rng),
        ]
        self.head = Conv3d("head", c0, 3, rng, zero_init=True)
        self._params = _collect(*self.reg_enc, *self.prior_enc, self.bottleneck,
                                *self.dec, self.head)

    def __call__(self, reg_in: Tensor, prior_in: Tensor) -> Tensor:
        """reg_in: (2, X, Y, Z); prior_in: (1, X, Y, Z) -> residual (3, X, Y, Z)."""
        dims = reg_in.data.shape[1:]
        r, _ = _pad_to_multiple(reg_in, 16)
        p, _ = _pad_to_multiple(prior_in, 16)
        r_feats, p_feats = [r], [p]
        hr_, hp = r, p
        for conv_r, conv_p in zip(self.reg_enc, self.prior_enc):
            hr_ = _lrelu(conv_r(hr_))
            hp = _lrelu(conv_p(hp))
            r_feats.append(hr_)
            p_feats.append(hp)
        h = _lrelu(self.bottleneck(ag.concat([hr_, hp], axis=0)))
        for conv, skip_r, skip_p in zip(self.dec, r_feats[-2::-1], p_feats[-2::-1]):
            h = ag.upsample2x_nearest3d(h)
            h = _lrelu(conv(ag.concat([h, skip_r, skip_p], axis=0)))
        out = self.head(h)
        return ag.narrow(ag.narrow(ag.narrow(out, 1, 0, dims[0]), 2, 0, dims[1]),
                         3, 0, dims[2])


def fine_forward(net: FineDirNet, f: Tensor, m: Tensor, p_aligned: Tensor | None,
                 phi_tilde_m2f: Tensor) -> tuple[Tensor, Tensor]:
    """Residual estimation: returns (v, phi_star_m2f = v + phi_tilde_m2f).

    Inputs are (1, X, Y, Z) HR tensors; the registration path sees the
    fixed image alongside the moving image pre-warped by the initial
    field; the prior path sees the pre-aligned prior (zeros when absent).
    """
    m_init = warp_channels(m, phi_tilde_m2f)
    reg_in = ag.concat([f, m_init], axis=0)
    if p_aligned is None:
        p_aligned = Tensor(np.zeros_like(f.data))
    v = net(reg_in, p_aligned)
    return v, ag.add(v, phi_tilde_m2f)
