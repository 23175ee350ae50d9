"""Differentiable neural-network primitives over rank-4 tensors."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, make_output

# while set, the non-smooth ops (relu, max_pool2d, channel_max) append their
# branch decisions here; gradient checks use it to spot stencils that straddle a kink
_decisions = None


@contextmanager
def record_decisions():
    """Collect the branch decisions of every non-smooth op run inside the block."""
    global _decisions
    saved, _decisions = _decisions, []
    try:
        yield _decisions
    finally:
        _decisions = saved


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size, kernel, stride=1, padding=0, dilation=1):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv_transpose_output_size(size, kernel, stride=1, padding=0, output_padding=0, dilation=1):
    return (size - 1) * stride - 2 * padding + dilation * (kernel - 1) + output_padding + 1


@dataclass(frozen=True)
class Conv2dSpec:
    """Geometry of one convolution. ``groups == in_channels`` is depthwise."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: int = 1
    groups: int = 1
    bias: bool = False
    transposed: bool = False
    output_padding: tuple = (0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "output_padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.dilation < 1:
            raise ValueError("dilation must be a positive integer")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}"
            )
        if self.transposed and self.groups != 1:
            raise ValueError("grouped transposed convolution is not supported")

    @property
    def weight_shape(self):
        kh, kw = self.kernel
        if self.transposed:
            return (self.in_channels, self.out_channels, kh, kw)
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    @property
    def fan_in(self):
        _, c, kh, kw = self.weight_shape
        return c * kh * kw

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels and self.groups > 1

    def output_hw(self, h, w):
        (kh, kw), (sh, sw), (ph, pw), r = self.kernel, self.stride, self.padding, self.dilation
        if self.transposed:
            oph, opw = self.output_padding
            ho = conv_transpose_output_size(h, kh, sh, ph, oph, r)
            wo = conv_transpose_output_size(w, kw, sw, pw, opw, r)
        else:
            ho = conv_output_size(h, kh, sh, ph, r)
            wo = conv_output_size(w, kw, sw, pw, r)
        if ho < 1 or wo < 1:
            raise ShapeError(f"convolution {self} gives non-positive output {ho}x{wo} from {h}x{w}")
        return ho, wo

    def param_count(self):
        n = int(np.prod(self.weight_shape))
        return n + (self.out_channels if self.bias else 0)

    def macs(self, in_shape):
        """Multiply-accumulates for an input of ``in_shape``."""
        n, _, h, w = in_shape
        kh, kw = self.kernel
        if self.transposed:
            # scatter form: every input element meets every kernel tap
            return n * self.in_channels * h * w * self.out_channels * kh * kw
        ho, wo = self.output_hw(h, w)
        return n * self.out_channels * ho * wo * kh * kw * (self.in_channels // self.groups)


def _tap_ranges(size_in, size_out, index, stride, pad, dil):
    """Output and input slices along one axis where a kernel tap hits real (unpadded) input."""
    off = index * dil - pad
    lo = max(0, -(off // stride) if off < 0 else 0)
    while lo * stride + off < 0:
        lo += 1
    hi = min(size_out - 1, (size_in - 1 - off) // stride)
    if hi < lo:
        return None
    start = lo * stride + off
    return slice(lo, hi + 1), slice(start, start + stride * (hi - lo) + 1, stride)


def _geometry(in_hw, out_hw, kernel, stride, padding, dilation):
    """Per-tap (tap index, out_h, out_w, in_h, in_w) slices; taps that miss the input are dropped."""
    taps = []
    kh, kw = kernel
    for i in range(kh):
        rh = _tap_ranges(in_hw[0], out_hw[0], i, stride[0], padding[0], dilation[0])
        if rh is None:
            continue
        for j in range(kw):
            rw = _tap_ranges(in_hw[1], out_hw[1], j, stride[1], padding[1], dilation[1])
            if rw is None:
                continue
            taps.append((i * kw + j, rh[0], rw[0], rh[1], rw[1]))
    return taps


def _im2col(x, taps, kk, out_hw):
    """(N,C,H,W) -> (C*kk, N*Ho*Wo) patch matrix."""
    n, c = x.shape[:2]
    ho, wo = out_hw
    cols = np.zeros((c, kk, n, ho, wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for t, oh, ow, ih, iw in taps:
        cols[:, t, :, oh, ow] = xt[:, :, ih, iw]
    return cols.reshape(c * kk, n * ho * wo)


def _col2im(cols, taps, kk, n, c, in_hw, out_hw):
    """Adjoint of :func:`_im2col`: scatter-add patches back to (N,C,H,W)."""
    ho, wo = out_hw
    cols = cols.reshape(c, kk, n, ho, wo)
    out = np.zeros((c, n, *in_hw), dtype=cols.dtype)
    for t, oh, ow, ih, iw in taps:
        out[:, :, ih, iw] += cols[:, t, :, oh, ow]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _depthwise_forward(x, w, taps, kw, out_hw):
    n, c = x.shape[:2]
    out = np.zeros((n, c, *out_hw), dtype=x.dtype)
    for t, oh, ow, ih, iw in taps:
        out[:, :, oh, ow] += x[:, :, ih, iw] * w[:, 0, t // kw, t % kw][None, :, None, None]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           dilation=1, groups=1) -> Tensor:
    """Cross-correlation with zero padding, stride, dilation and channel groups."""
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c != cg * groups:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cg * groups}")
    if o % groups:
        raise ShapeError(f"conv2d: {o} output channels not divisible by groups={groups}")
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    ho = conv_output_size(h, kh, stride[0], padding[0], dilation[0])
    wo = conv_output_size(w, kw, stride[1], padding[1], dilation[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo}")
    taps = _geometry((h, w), (ho, wo), (kh, kw), stride, padding, dilation)
    kk = kh * kw
    xd, wd = x.data, weight.data
    og = o // groups
    depthwise = cg == 1 and groups == c == o

    if depthwise:
        out = _depthwise_forward(xd, wd, taps, kw, (ho, wo))
        cols = None
    else:
        cols = [_im2col(xd[:, gi * cg:(gi + 1) * cg], taps, kk, (ho, wo)) for gi in range(groups)]
        parts = [wd[gi * og:(gi + 1) * og].reshape(og, cg * kk) @ cols[gi] for gi in range(groups)]
        out2 = parts[0] if groups == 1 else np.concatenate(parts, axis=0)
        out = np.ascontiguousarray(out2.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gw = np.zeros_like(wd)
        if depthwise:
            gx = np.zeros_like(xd)
            for t, oh, ow, ih, iw in taps:
                gs = g[:, :, oh, ow]
                i, j = divmod(t, kw)
                gw[:, 0, i, j] = (gs * xd[:, :, ih, iw]).sum(axis=(0, 2, 3))
                gx[:, :, ih, iw] += gs * wd[:, 0, i, j][None, :, None, None]
        else:
            g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
            gx_parts = []
            for gi in range(groups):
                gg = g2[gi * og:(gi + 1) * og]
                w2 = wd[gi * og:(gi + 1) * og].reshape(og, cg * kk)
                gw[gi * og:(gi + 1) * og] = (gg @ cols[gi].T).reshape(og, cg, kh, kw)
                gx_parts.append(_col2im(w2.T @ gg, taps, kk, n, cg, (h, w), (ho, wo)))
            gx = gx_parts[0] if groups == 1 else np.concatenate(gx_parts, axis=1)
        gb = None if bias is None else g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=2, padding=1,
                     output_padding=1, dilation=1) -> Tensor:
    """Transposed convolution; ``weight`` is (in_channels, out_channels, kh, kw).

    Computed as the adjoint of the matching forward convolution: one GEMM to
    patch space followed by a scatter-add.
    """
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    oph, opw = _pair(output_padding)
    ho = conv_transpose_output_size(h, kh, stride[0], padding[0], oph, dilation[0])
    wo = conv_transpose_output_size(w, kw, stride[1], padding[1], opw, dilation[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output size {ho}x{wo}")
    # taps of the forward conv mapping (ho, wo) -> (h, w)
    taps = _geometry((ho, wo), (h, w), (kh, kw), stride, padding, dilation)
    kk = kh * kw
    xd, wd = x.data, weight.data
    w2 = wd.reshape(c, o * kk)
    x2 = xd.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    out = _col2im(w2.T @ x2, taps, kk, n, o, (ho, wo), (h, w))
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gcols = _im2col(g, taps, kk, (h, w))
        gx = (w2 @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        gw = (x2 @ gcols.T).reshape(wd.shape)
        gbias = None if bias is None else g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return np.ascontiguousarray(gx), gw, gbias

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv_transpose2d", out, inputs, bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum=0.1, eps=1e-5) -> Tensor:
    """Per-channel normalization. Running statistics are updated in place in training mode."""
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1):
        raise ShapeError(f"batch_norm: {c} channels but gamma has shape {gamma.shape}")
    xd, gd, bd = x.data, gamma.data, beta.data
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = np.mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        running_mean *= 1 - momentum
        running_mean += momentum * mu.ravel()
        running_var *= 1 - momentum
        running_var += momentum * var.ravel()

        def bw(g):
            gxhat = g * gd
            gx = inv_std / m * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return gx, (g * xhat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        inv_std = (1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)).astype(xd.dtype)
        xhat = (xd - mu) * inv_std

        def bw(g):
            return (g * gd * inv_std, (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                    g.sum(axis=(0, 2, 3), keepdims=True))

    out = gd * xhat + bd
    return make_output("batch_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    if _decisions is not None:
        _decisions.append(out > 0)
    return make_output("relu", out, (x,), lambda g: (np.where(out > 0, g, 0),))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_output("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def _tap_slice(i, j, stride, out_hw):
    (sh, sw), (ho, wo) = stride, out_hw
    return (slice(None), slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))


def _pool_geometry(x, kernel, stride):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    _, _, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    taps = [_tap_slice(i, j, (sh, sw), (ho, wo)) for i in range(kh) for j in range(kw)]
    return taps, ho, wo


def max_pool2d(x: Tensor, kernel=2, stride=None) -> Tensor:
    """Window max; ties resolve to the first tap in row-major window order."""
    taps, ho, wo = _pool_geometry(x, kernel, stride)
    xd = x.data
    best = xd[taps[0]].copy()
    arg = np.zeros(best.shape, dtype=np.int32)
    for t, sl in enumerate(taps[1:], start=1):
        xs = xd[sl]
        better = xs > best
        best = np.where(better, xs, best)
        arg[better] = t
    if _decisions is not None:
        _decisions.append(arg)

    def bw(g):
        gx = np.zeros_like(xd)
        for t, sl in enumerate(taps):
            gx[sl] += g * (arg == t)
        return (gx,)

    return make_output("max_pool2d", best, (x,), bw)


def avg_pool2d(x: Tensor, kernel=2, stride=None) -> Tensor:
    taps, ho, wo = _pool_geometry(x, kernel, stride)
    xd = x.data
    k = len(taps)
    acc = np.zeros((xd.shape[0], xd.shape[1], ho, wo), dtype=xd.dtype)
    for sl in taps:
        acc += xd[sl]
    out = acc / k

    def bw(g):
        gx = np.zeros_like(xd)
        for sl in taps:
            gx[sl] += g / k
        return (gx,)

    return make_output("avg_pool2d", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_output("global_avg_pool", out, (x,),
                       lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def directional_avg_pool(x: Tensor, axis: str) -> Tensor:
    """``axis='height'`` keeps H and averages W -> (N,C,H,1); ``'width'`` -> (N,C,1,W)."""
    if axis == "height":
        red = 3
    elif axis == "width":
        red = 2
    else:
        raise ValueError(f"axis must be 'height' or 'width', got {axis!r}")
    k = x.shape[red]
    out = x.data.mean(axis=red, keepdims=True)
    return make_output("directional_avg_pool", out, (x,),
                       lambda g: (np.broadcast_to(g / k, x.shape).copy(),))


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return make_output("channel_mean", out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),))


def channel_max(x: Tensor) -> Tensor:
    """Max over channels; the gradient goes to the lowest-index maximal channel."""
    xd = x.data
    arg = xd.argmax(axis=1)[:, None]
    out = np.take_along_axis(xd, arg, axis=1)
    if _decisions is not None:
        _decisions.append(arg)

    def bw(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, arg, g, axis=1)
        return (gx,)

    return make_output("channel_max", out, (x,), bw)


def shuffle_permutation(channels, groups):
    """Output channel k takes input channel ``perm[k]``."""
    if groups < 1 or channels % groups:
        raise ValueError(f"{channels} channels not divisible into {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.ravel()


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    perm = shuffle_permutation(x.shape[1], groups)
    inverse = np.argsort(perm)
    return make_output("channel_shuffle", x.data[:, perm], (x,), lambda g: (g[:, inverse],))


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_output("upsample_nearest2x", out, (x,), bw)


def upsample(x: Tensor, mode="nearest2x", weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    if mode == "nearest2x":
        return upsample_nearest2x(x)
    if mode == "transposed_conv":
        if weight is None:
            raise ValueError("transposed_conv upsampling needs a weight")
        return conv_transpose2d(x, weight, bias, stride=2, padding=1, output_padding=1)
    raise ValueError(f"unknown upsample mode {mode!r}")


def _softmax(xd):
    z = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), z


def softmax_channels(x: Tensor) -> Tensor:
    s, _ = _softmax(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_output("softmax", s, (x,), bw)


def log_softmax_channels(x: Tensor) -> Tensor:
    s, z = _softmax(x.data)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def bw(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return make_output("log_softmax", out, (x,), bw)
