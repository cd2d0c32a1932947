"""Minimal reverse-mode automatic differentiation on float32 numpy arrays.

Eager Wengert-list design: while a :class:`Tape` is active, every operation
on a gradient-requiring :class:`Tensor` appends its result node to the tape
(creation order is already a topological order), and ``backward`` walks the
list once in reverse. Without an active tape the same functions run
forward-only, which is the inference path for frozen models.

Broadcasting is deliberately restricted to scalar-with-tensor; everything
else must shape-match exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_F32 = np.float32


class Tape:
    """Ordered record of operations for one forward/backward cycle."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._used = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def _record(self, node: "Tensor"):
        self._nodes.append(node)


_ACTIVE: Tape | None = None


class Tensor:
    """A float32 value array, optionally participating in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tape",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_F32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(_F32, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_F32))


def _make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Create an op result, recording it if a tape is active and needed."""
    out = Tensor(data)
    if _ACTIVE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._tape = _ACTIVE
        _ACTIVE._record(out)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; leaf grads accumulate in ``.grad``.

    The tape is consumed: all intermediate nodes are released and a second
    backward on the same tape raises.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss is not attached to a tape (no recorded graph)")
    if tape._used:
        raise RuntimeError("tape already consumed by a previous backward; build a new tape")
    tape._used = True
    loss.grad = np.ones((), dtype=_F32)
    for node in reversed(tape._nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
        # release intermediates as we go
        node.grad = None
        node._backward = None
        node._parents = ()
        node._tape = None
    tape._nodes.clear()


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def _bin_shapes(a: Tensor, b: Tensor):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape} "
                     "(only scalar broadcasting is supported)")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g, dtype=_F32).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bin_shapes(a, b)

    def bwd(g):
        if a.requires_grad:
            a._accum(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g, b.data.shape))

    return _make_node(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bin_shapes(a, b)

    def bwd(g):
        if a.requires_grad:
            a._accum(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(-g, b.data.shape))

    return _make_node(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bin_shapes(a, b)

    def bwd(g):
        if a.requires_grad:
            a._accum(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g * a.data, b.data.shape))

    return _make_node(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bin_shapes(a, b)

    def bwd(g):
        if a.requires_grad:
            a._accum(_reduce_to(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _make_node(a.data / b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accum(-g)

    return _make_node(-a.data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return _make_node(out_data, (a,), bwd)


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    shifted = a.data + _F32(eps)
    if np.any(shifted <= 0):
        raise ValueError("log of non-positive value (supply eps to guard)")

    def bwd(g):
        if a.requires_grad:
            a._accum(g / shifted)

    return _make_node(np.log(shifted), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out_data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (_F32(0.5) / out_data))

    return _make_node(out_data, (a,), bwd)


def pow2(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accum(g * (_F32(2.0) * a.data))

    return _make_node(a.data * a.data, (a,), bwd)


def powc(a: Tensor, p: float) -> Tensor:
    """a ** p for a constant real exponent; requires a > 0."""
    if np.any(a.data <= 0):
        raise ValueError("powc requires strictly positive base")
    out_data = np.power(a.data, _F32(p))

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (_F32(p) * out_data / a.data))

    return _make_node(out_data, (a,), bwd)


def absval(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    return _make_node(np.abs(a.data), (a,), bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > _F32(floor)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * mask)

    return _make_node(np.maximum(a.data, _F32(floor)), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    return clamp_min(a, 0.0)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, _F32(1.0), _F32(slope))

    def bwd(g):
        if a.requires_grad:
            a._accum(g * scale)

    return _make_node(a.data * scale, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _stable_sigmoid(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (out_data * (1.0 - out_data)))

    return _make_node(out_data, (a,), bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (1.0 - out_data * out_data))

    return _make_node(out_data, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed stably; backward is sigmoid(a)."""
    x = a.data
    out_data = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(_F32)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * _stable_sigmoid(x))

    return _make_node(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            a._accum(np.full(shape, g, dtype=_F32))

    return _make_node(a.data.sum(dtype=_F32), (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            a._accum(np.full(shape, g / _F32(n), dtype=_F32))

    return _make_node(_F32(a.data.mean(dtype=np.float64)), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(old))

    return _make_node(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start and start + length <= n):
        raise ValueError(f"narrow [{start}, {start + length}) out of range for dim {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            full = np.zeros(shape, dtype=_F32)
            full[idx] = g
            a._accum(full)

    return _make_node(a.data[idx].copy(), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a._accum(np.ascontiguousarray(g.transpose(inv)))

    return _make_node(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def take_axis(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis with an arbitrary (repeatable) index list."""
    idx = np.asarray(indices, dtype=np.int64)
    n = a.data.shape[axis]
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"take_axis index out of range for dim {n}")
    shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros(shape, dtype=_F32)
            np.add.at(np.moveaxis(acc, axis, 0), idx, np.moveaxis(g, axis, 0))
            a._accum(acc)

    return _make_node(a.data.take(idx, axis=axis), (a,), bwd)


def pad(a: Tensor, pads) -> Tensor:
    """Zero padding; ``pads`` is a ((before, after), ...) tuple per axis."""
    pads = tuple(tuple(p) for p in pads)
    if len(pads) != a.data.ndim:
        raise ValueError("pads must name every axis")
    crop = tuple(slice(b, b + n) for (b, _), n in zip(pads, a.data.shape))

    def bwd(g):
        if a.requires_grad:
            a._accum(g[crop])

    return _make_node(np.pad(a.data, pads), (a,), bwd)


# ---------------------------------------------------------------------------
# convolutions


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_F32)


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# column matrices at most this many elements are kept alive for backward;
# larger ones are rebuilt there to cap peak memory on fine-grid layers
_COL_CACHE_LIMIT = 32 * 1024 * 1024


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad_: int = 1) -> Tensor:
    """Cross-correlation of (Cin,X,Y,Z) with (Cout,Cin,kx,ky,kz) weights."""
    cin, *spatial = x.data.shape
    cout, cin_w, *k = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv3d channel mismatch: input {cin}, weight expects {cin_w}")
    if b.data.shape != (cout,):
        raise ValueError("conv3d bias shape must be (Cout,)")
    out_sp = tuple(_conv_out(n, kk, stride, pad_) for n, kk in zip(spatial, k))
    if any(n < 1 for n in out_sp):
        raise ValueError(f"conv3d kernel {k} does not fit padded input {spatial}")

    wmat = w.data.reshape(cout, -1)

    def im2col():
        xp = np.pad(x.data, ((0, 0),) + ((pad_, pad_),) * 3)
        win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(1, 2, 3))
        win = win[:, ::stride, ::stride, ::stride]
        cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(-1, wmat.shape[1])
        return cols, xp.shape

    cols, xp_shape = im2col()
    out_data = (cols @ wmat.T + b.data).T.reshape((cout,) + out_sp)
    keep = cols if cols.size <= _COL_CACHE_LIMIT else None
    del cols

    def bwd(g):
        gmat = g.reshape(cout, -1).T
        if w.requires_grad or x.requires_grad:
            cols_b = keep if keep is not None else im2col()[0]
        if b.requires_grad:
            b._accum(g.sum(axis=(1, 2, 3), dtype=_F32))
        if w.requires_grad:
            w._accum((gmat.T @ cols_b).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(out_sp + (cin,) + tuple(k))
            dxp = np.zeros(xp_shape, dtype=_F32)
            for a in range(k[0]):
                for bb in range(k[1]):
                    for c in range(k[2]):
                        dxp[:,
                            a:a + stride * out_sp[0]:stride,
                            bb:bb + stride * out_sp[1]:stride,
                            c:c + stride * out_sp[2]:stride] += \
                            dcols[:, :, :, :, a, bb, c].transpose(3, 0, 1, 2)
            sl = tuple(slice(pad_, pad_ + n) for n in spatial)
            x._accum(dxp[(slice(None),) + sl])

    return _make_node(out_data, (x, w, b), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad_: int = 1) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,kh,kw) weights."""
    n, cin, *spatial = x.data.shape
    cout, cin_w, *k = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight expects {cin_w}")
    if b.data.shape != (cout,):
        raise ValueError("conv2d bias shape must be (Cout,)")
    out_sp = tuple(_conv_out(m, kk, stride, pad_) for m, kk in zip(spatial, k))
    if any(m < 1 for m in out_sp):
        raise ValueError(f"conv2d kernel {k} does not fit padded input {spatial}")

    wmat = w.data.reshape(cout, -1)

    def im2col():
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad_, pad_), (pad_, pad_)))
        win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, wmat.shape[1])
        return np.ascontiguousarray(cols), xp.shape

    cols, xp_shape = im2col()
    out_data = (cols @ wmat.T + b.data).reshape((n,) + out_sp + (cout,))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    del cols

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if w.requires_grad or x.requires_grad:
            cols_b, _ = im2col()
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3), dtype=_F32))
        if w.requires_grad:
            w._accum((gmat.T @ cols_b).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape((n,) + out_sp + (cin,) + tuple(k))
            dxp = np.zeros(xp_shape, dtype=_F32)
            for a in range(k[0]):
                for bb in range(k[1]):
                    dxp[:, :,
                        a:a + stride * out_sp[0]:stride,
                        bb:bb + stride * out_sp[1]:stride] += \
                        dcols[:, :, :, :, a, bb].transpose(0, 3, 1, 2)
            x._accum(dxp[:, :, pad_:pad_ + spatial[0], pad_:pad_ + spatial[1]])

    return _make_node(out_data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# resampling


def upsample2x_nearest3d(x: Tensor) -> Tensor:
    c, nx, ny, nz = x.data.shape
    out_data = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        if x.requires_grad:
            x._accum(g.reshape(c, nx, 2, ny, 2, nz, 2).sum(axis=(2, 4, 6), dtype=_F32))

    return _make_node(out_data, (x,), bwd)


def upsample2x_nearest2d(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        if x.requires_grad:
            x._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=_F32))

    return _make_node(out_data, (x,), bwd)


def _reflect_idx(n: int, r: int) -> np.ndarray:
    if r >= n:
        raise ValueError(f"reflect pad {r} needs dim > {r}")
    core = np.arange(n)
    return np.concatenate([core[r:0:-1], core, core[n - 2:n - 2 - r:-1]])


def reflect_pad2d(x: Tensor, r: int) -> Tensor:
    """Mirror-pad the trailing two axes of (N,C,H,W) by r on each side."""
    n, c, h, w = x.data.shape
    ih = _reflect_idx(h, r)
    iw = _reflect_idx(w, r)
    out_data = x.data[:, :, ih][:, :, :, iw]

    def bwd(g):
        if x.requires_grad:
            acc_h = np.zeros((n, c, h, w + 2 * r), dtype=_F32)
            np.add.at(acc_h.transpose(2, 0, 1, 3), ih, g.transpose(2, 0, 1, 3))
            acc = np.zeros((n, c, h, w), dtype=_F32)
            np.add.at(acc.transpose(3, 0, 1, 2), iw, acc_h.transpose(3, 0, 1, 2))
            x._accum(acc)

    return _make_node(np.ascontiguousarray(out_data), (x,), bwd)


def avgpool2x2d(x: Tensor) -> Tensor:
    """2x2 average pooling on (N,C,H,W); odd trailing rows/cols are cropped."""
    n, c, h, w = x.data.shape
    h2, w2 = h // 2, w // 2
    xc = x.data[:, :, :2 * h2, :2 * w2]
    out_data = xc.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5), dtype=_F32)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros((n, c, h, w), dtype=_F32)
            full[:, :, :2 * h2, :2 * w2] = (g / _F32(4.0)).repeat(2, axis=2).repeat(2, axis=3)
            x._accum(full)

    return _make_node(out_data, (x,), bwd)


def _axis_lin_weights(n_src: int, n_dst: int):
    """Align-corners linear resampling indices/weights for one axis."""
    if n_dst == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_dst, dtype=np.float64) * (n_src - 1) / (n_dst - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(n_src - 2, 0))
    f = (pos - i0).astype(_F32)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, f


def resize_linear(x: Tensor, target: tuple[int, ...]) -> Tensor:
    """Separable align-corners linear resize of the trailing spatial axes.

    The last ``len(target)`` axes are resampled; any leading axes (batch,
    channel) pass through. Exact at coinciding sample positions.
    """
    nd = x.data.ndim
    ns = len(target)
    if ns > nd:
        raise ValueError(f"target rank {ns} exceeds tensor rank {nd}")
    spatial = x.data.shape[nd - ns:]
    axis0 = nd - ns
    plans = [_axis_lin_weights(n_src, n_dst) for n_src, n_dst in zip(spatial, target)]

    def fwd(arr):
        for off, (i0, i1, f) in enumerate(plans):
            ax = axis0 + off
            fshape = [1] * arr.ndim
            fshape[ax] = len(f)
            fb = f.reshape(fshape)
            arr = arr.take(i0, axis=ax) * (1 - fb) + arr.take(i1, axis=ax) * fb
        return arr.astype(_F32)

    def bwd(g):
        if not x.requires_grad:
            return
        for off in range(ns - 1, -1, -1):
            ax = axis0 + off
            i0, i1, f = plans[off]
            fshape = [1] * g.ndim
            fshape[ax] = len(f)
            fb = f.reshape(fshape)
            src_shape = list(g.shape)
            src_shape[ax] = spatial[off]
            acc = np.zeros(src_shape, dtype=_F32)
            acc_m = np.moveaxis(acc, ax, 0)
            np.add.at(acc_m, i0, np.moveaxis(g * (1 - fb), ax, 0))
            np.add.at(acc_m, i1, np.moveaxis(g * fb, ax, 0))
            g = acc
        x._accum(g)

    return _make_node(fwd(x.data), (x,), bwd)


# ---------------------------------------------------------------------------
# windowed sums and normalization


def _box_sum(arr: np.ndarray, w: int) -> np.ndarray:
    """Sliding-window sum of size w per spatial axis, zero beyond borders."""
    r = w // 2
    out = arr.astype(np.float64)
    for ax in range(arr.ndim):
        n = arr.shape[ax]
        s = np.concatenate(
            [np.zeros_like(out.take([0], axis=ax)), np.cumsum(out, axis=ax)], axis=ax
        )
        hi = np.minimum(np.arange(n) + r + 1, n)
        lo = np.maximum(np.arange(n) - r, 0)
        out = s.take(hi, axis=ax) - s.take(lo, axis=ax)
    return out.astype(_F32)


def local_sum(x: Tensor, w: int) -> Tensor:
    """Box-filter sum over a w-wide window per axis (zero-padded, odd w).

    Self-adjoint, so the backward pass is the same box filter.
    """
    if w % 2 != 1 or w < 1:
        raise ValueError("window must be odd and positive")

    def bwd(g):
        if x.requires_grad:
            x._accum(_box_sum(g, w))

    return _make_node(_box_sum(x.data, w), (x,), bwd)


def local_count(shape, w: int) -> np.ndarray:
    """Per-voxel window population for `local_sum` on a given shape."""
    return _box_sum(np.ones(shape, dtype=_F32), w)


def instance_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample per-channel normalization over the spatial axes of (N,C,H,W)."""
    n, c, h, w = x.data.shape
    if h * w < 2:
        raise ValueError("instance_norm needs spatial size >= 2 per channel")
    m = h * w
    mu = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    var = ((x.data.astype(np.float64) - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(_F32)
    xhat = ((x.data - mu) * inv_std).astype(_F32)
    gb = gamma.data.reshape(1, c, 1, 1)
    out_data = xhat * gb + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3), dtype=_F32))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3), dtype=_F32))
        if x.requires_grad:
            dxhat = g * gb
            t1 = dxhat.mean(axis=(2, 3), keepdims=True, dtype=_F32)
            t2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True, dtype=_F32)
            x._accum(inv_std * (dxhat - t1 - xhat * t2))

    return _make_node(out_data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# optimization and parameter IO


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One in-place Adam update with bias correction; returns nothing."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / _F32(1 - beta1 ** t)
    vhat = v / _F32(1 - beta2 ** t)
    param -= _F32(lr) * mhat / (np.sqrt(vhat) + _F32(eps))


class Adam:
    """Adam over a list of (name, Tensor) parameters."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self):
        self.t += 1
        for (name, p), m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, m, v, self.t, self.lr,
                      self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def save_params(path, model_kind: str, named_params) -> None:
    """Checkpoint: JSON manifest (names, shapes, offsets) + sibling f32le blob."""
    entries = []
    offset = 0
    blobs = []
    for name, p in named_params:
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=_F32)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(np.ascontiguousarray(arr, dtype="<f4"))
    manifest = {
        "schema_version": 1,
        "model_kind": model_kind,
        "total_floats": offset,
        "params": entries,
    }
    Path(path).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    with open(str(path) + ".raw", "wb") as fh:
        for blob in blobs:
            fh.write(blob.tobytes())


def load_params(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read a checkpoint back; returns (model_kind, {name: float32 array})."""
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    if manifest.get("schema_version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint schema")
    blob = np.fromfile(str(path) + ".raw", dtype="<f4")
    if blob.size != manifest["total_floats"]:
        raise ValueError(f"{path}: blob size {blob.size} != manifest {manifest['total_floats']}")
    out = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return manifest["model_kind"], out
