"""Composite blocks of the bilateral segmentation network.

Attention modules return their gating map alongside the gated features so
tests can inspect it. ``sigmoid`` is looked up at call time from this
module's namespace, which lets tests stub the gate.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import nn as F
from .layers import (RF, BatchNorm2d, Container, Conv2d, ConvBN, Cost, Module, conv3x3,
                     deconv3x3, depthwise, numel, pointwise)
from .nn import Conv2dSpec, sigmoid
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, add, add_n, concat, mul, permute, split


def _check_channels(x, expected, who):
    if x.shape[1] != expected:
        raise ShapeError(f"{who}: expected {expected} channels, got {x.shape[1]}")


class CAM(Module):
    """Channel attention: pooled channel descriptor -> 1D conv across channels -> sigmoid.

    The (N, C, 1, 1) descriptor is laid out along the width axis so a
    ``1 x k`` convolution mixes neighbouring channels. The gate costs
    ``k`` weights regardless of C.
    """

    def __init__(self, channels, k=3, dtype=DEFAULT_DTYPE):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("CAM kernel size must be odd")
        self.channels = channels
        self.k = k
        self.conv = Conv2d(Conv2dSpec(1, 1, kernel=(1, k), padding=(0, k // 2)), dtype)

    def attention_map(self, x):
        pooled = F.global_avg_pool(x)
        seq = permute(pooled, (0, 3, 2, 1))
        mixed = permute(self.conv(seq), (0, 3, 2, 1))
        return sigmoid(mixed)

    def apply(self, x):
        _check_channels(x, self.channels, "CAM")
        m = self.attention_map(x)
        return mul(x, m), m

    def forward(self, x, training=False):
        return self.apply(x)[0]

    def out_shape(self, shape):
        if shape[1] != self.channels:
            raise ShapeError(f"CAM: expected {self.channels} channels, got {shape[1]}")
        return shape

    def cost(self, shape):
        n, c = shape[:2]
        return Cost(macs=n * c * self.k, other=numel(shape) * 2 + n * c)

    def receptive(self, rf):
        return rf


def cam_apply(x, cam: CAM):
    return cam.apply(x)


class SAM(Module):
    """Spatial attention over the channel-wise mean and max maps.

    The k x k conv is followed by a single-channel batch norm before the
    sigmoid. The pooled maps of post-ReLU features are non-negative, and a
    bias-free conv on them drifts the gate to 0 under SGD; the norm keeps the
    logits centred.
    """

    def __init__(self, k=7, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.k = k
        self.conv = Conv2d(Conv2dSpec(2, 1, kernel=(k, k), padding=(k // 2, k // 2)), dtype)
        self.bn = BatchNorm2d(1, dtype=dtype)

    def attention_map(self, x, training=False):
        pooled = concat([F.channel_mean(x), F.channel_max(x)], axis=1)
        return sigmoid(self.bn(self.conv(pooled), training))

    def apply(self, x, training=False):
        m = self.attention_map(x, training)
        return mul(x, m), m

    def forward(self, x, training=False):
        return self.apply(x, training)[0]

    def out_shape(self, shape):
        return shape

    def cost(self, shape):
        n, c, h, w = shape
        return (self.conv.cost((n, 2, h, w)) + self.bn.cost((n, 1, h, w))
                + Cost(other=2 * numel(shape) + 2 * n * h * w))

    def receptive(self, rf):
        return RF.max(rf, self.conv.receptive(rf))


def sam_apply(x, sam: SAM, training=False):
    return sam.apply(x, training)


class _FactorizedBranch(Module):
    """Two depthwise 1D pairs with a CAM gate between them.

    ``first`` and ``second`` list the kernel shapes of each pair in
    application order. The last convolution carries no activation; the
    merge in the enclosing unit adds the branches before any non-linearity.
    """

    def __init__(self, channels, dilation, first, second, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.dw1 = ConvBN(depthwise(channels, first[0], dilation), dtype=dtype)
        self.dw2 = ConvBN(depthwise(channels, first[1], dilation), dtype=dtype)
        self.cam = CAM(channels, dtype=dtype)
        self.dw3 = ConvBN(depthwise(channels, second[0], dilation), dtype=dtype)
        self.dw4 = ConvBN(depthwise(channels, second[1], dilation), act=False, dtype=dtype)

    def head(self, x, training):
        return self.cam(self.dw2(self.dw1(x, training), training))

    def tail(self, y, training):
        return self.dw4(self.dw3(y, training), training)

    def cost(self, shape):
        return (self.dw1.cost(shape) + self.dw2.cost(shape) + self.cam.cost(shape)
                + self.dw3.cost(shape) + self.dw4.cost(shape))

    def receptive(self, rf):
        for m in (self.dw1, self.dw2, self.dw3, self.dw4):
            rf = m.receptive(rf)
        return rf


@dataclass
class BRUTrace:
    x_out: Tensor
    y11: Tensor
    y1: Tensor
    y21: Tensor
    y2: Tensor
    y3: Tensor
    pre_shuffle: Tensor
    y_out: Tensor


V, H = (3, 1), (1, 3)


class BRU(Module):
    """Bottleneck residual unit with a local branch, a dilated branch and an identity branch."""

    def __init__(self, channels, dilation=1, groups=2, dtype=DEFAULT_DTYPE):
        super().__init__()
        if channels % 2:
            raise ValueError(f"BRU needs an even channel count, got {channels}")
        half = channels // 2
        self.channels = channels
        self.dilation = dilation
        self.groups = groups
        self.reduce = ConvBN(pointwise(channels, half), dtype=dtype)
        self.left = _FactorizedBranch(half, 1, (V, H), (V, H), dtype)
        self.right = _FactorizedBranch(half, dilation, (V, H), (H, V), dtype)
        self.cam_mid = CAM(half, dtype=dtype)
        self.expand = ConvBN(pointwise(half, channels), act=False, dtype=dtype)
        self.cam_out = CAM(channels, dtype=dtype)

    def trace(self, x_in, training=False) -> BRUTrace:
        _check_channels(x_in, self.channels, "BRU")
        x_out = self.reduce(x_in, training)
        y11 = self.left.head(x_out, training)
        y1 = self.left.tail(y11, training)
        y21 = self.right.head(x_out, training)
        y2 = self.right.tail(y21, training)
        y3 = add_n([y11, self.cam_mid(x_out), y21])
        merged = add_n([y1, y2, y3])
        pre = add(self.cam_out(self.expand(merged, training)), x_in)
        return BRUTrace(x_out, y11, y1, y21, y2, y3, pre, F.channel_shuffle(pre, self.groups))

    def forward(self, x, training=False):
        return self.trace(x, training).y_out

    def out_shape(self, shape):
        if shape[1] != self.channels:
            raise ShapeError(f"BRU: expected {self.channels} channels, got {shape[1]}")
        return shape

    def cost(self, shape):
        n, c, h, w = shape
        half = (n, c // 2, h, w)
        return (self.reduce.cost(shape) + self.left.cost(half) + self.right.cost(half)
                + self.cam_mid.cost(half) + self.expand.cost(half) + self.cam_out.cost(shape)
                + Cost(other=4 * numel(half) + numel(shape)))

    def receptive(self, rf):
        return RF.max(self.left.receptive(rf), self.right.receptive(rf))


def bru_forward(x_in, bru: BRU, training=False) -> BRUTrace:
    return bru.trace(x_in, training)


class _SeparableConv(Module):
    """Depthwise 3x3 then pointwise, followed by batch norm and ReLU."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.dw = Conv2d(depthwise(channels, (3, 3)), dtype)
        self.pw = Conv2d(pointwise(channels, channels), dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)

    def forward(self, x, training=False):
        return F.relu(self.bn(self.pw(self.dw(x)), training))

    def out_shape(self, shape):
        return self.pw.out_shape(self.dw.out_shape(shape))

    def cost(self, shape):
        return self.dw.cost(shape) + self.pw.cost(shape) + self.bn.cost(shape) + Cost(other=numel(shape))

    def receptive(self, rf):
        return self.dw.receptive(rf)


class DRM(Module):
    """Detail residual module: 3x3 conv, two separable 3x3 convs, pointwise projection, residual add."""

    def __init__(self, channels=16, width=64, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.width = width
        self.conv1 = ConvBN(conv3x3(channels, width), dtype=dtype)
        self.conv2 = _SeparableConv(width, dtype)
        self.conv3 = _SeparableConv(width, dtype)
        self.proj = ConvBN(pointwise(width, channels), dtype=dtype)

    def stages(self, x, training=False):
        """Feature maps at the input, after conv1, after the separable pair, and at the output."""
        _check_channels(x, self.channels, "DRM")
        c1 = self.conv1(x, training)
        c3 = self.conv3(self.conv2(c1, training), training)
        out = add(self.proj(c3, training), x)
        return [x, c1, c3, out]

    def forward(self, x, training=False):
        return self.stages(x, training)[-1]

    def stage_shapes(self, shape):
        c1 = self.conv1.out_shape(shape)
        c3 = self.conv3.out_shape(self.conv2.out_shape(c1))
        return [shape, c1, c3, self.proj.out_shape(c3)]

    def out_shape(self, shape):
        return self.stage_shapes(shape)[-1]

    def cost(self, shape):
        c1 = self.conv1.out_shape(shape)
        return (self.conv1.cost(shape) + self.conv2.cost(c1) + self.conv3.cost(c1)
                + self.proj.cost(c1) + Cost(other=numel(shape)))

    def receptive(self, rf):
        for m in (self.conv1, self.conv2, self.conv3, self.proj):
            rf = m.receptive(rf)
        return rf


def drm_forward(x, drm: DRM, training=False):
    return drm(x, training)


class FAM(Module):
    """Feature aggregation: sum both branches, then gate with height- and width-pooled attention."""

    def __init__(self, channels, ratio=4, min_width=8, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.mid = max(min_width, channels // ratio)
        self.reduce = ConvBN(pointwise(channels, self.mid), dtype=dtype)
        self.t_h = Conv2d(pointwise(self.mid, channels, bias=True), dtype)
        self.t_w = Conv2d(pointwise(self.mid, channels, bias=True), dtype)

    def apply(self, x1, x2, training=False):
        if x1.shape != x2.shape:
            raise ShapeError(f"FAM: branch shapes differ, {x1.shape} vs {x2.shape}")
        _check_channels(x1, self.channels, "FAM")
        h = x1.shape[2]
        x = add(x1, x2)
        pooled_h = permute(F.directional_avg_pool(x, "height"), (0, 1, 3, 2))  # (N,C,1,H)
        pooled_w = F.directional_avg_pool(x, "width")  # (N,C,1,W)
        f = self.reduce(concat([pooled_h, pooled_w], axis=3), training)
        f_h, f_w = split(f, [h, x.shape[3]], axis=3)
        k_h = sigmoid(self.t_h(permute(f_h, (0, 1, 3, 2))))  # (N,C,H,1)
        k_w = sigmoid(self.t_w(f_w))  # (N,C,1,W)
        y = mul(mul(x, k_h), k_w)
        return y, {"X": x, "f": f, "f_h": f_h, "f_w": f_w, "K_h": k_h, "K_w": k_w}

    def forward(self, x1, x2, training=False):
        return self.apply(x1, x2, training)[0]

    def out_shape(self, shape):
        return shape

    def cost(self, shape):
        n, c, h, w = shape
        desc = (n, c, 1, h + w)
        return (self.reduce.cost(desc) + self.t_h.cost((n, self.mid, h, 1))
                + self.t_w.cost((n, self.mid, 1, w))
                + Cost(other=numel(shape) * 4 + n * c * (h + w)))

    def receptive(self, rf):
        return rf


def fam_forward(x1, x2, fam: FAM, training=False):
    return fam.apply(x1, x2, training)


class InitialBlock(Container):
    """Three 3x3 convolutions; the first halves the resolution."""

    def __init__(self, in_channels=3, out_channels=16, dtype=DEFAULT_DTYPE):
        super().__init__([
            ("conv1", ConvBN(conv3x3(in_channels, out_channels, stride=2), dtype=dtype)),
            ("conv2", ConvBN(conv3x3(out_channels, out_channels), dtype=dtype)),
            ("conv3", ConvBN(conv3x3(out_channels, out_channels), dtype=dtype)),
        ])

    def forward(self, x, training=False):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"initial block needs even spatial size, got {x.shape[2]}x{x.shape[3]}")
        return super().forward(x, training)

    def out_shape(self, shape):
        if shape[2] % 2 or shape[3] % 2:
            raise ShapeError(f"initial block needs even spatial size, got {shape[2]}x{shape[3]}")
        return super().out_shape(shape)


class DownsampleBlock(Module):
    """Strided 3x3 conv concatenated with a 2x2 max pool of the input, then BN and ReLU."""

    def __init__(self, in_channels, out_channels, dtype=DEFAULT_DTYPE):
        super().__init__()
        if out_channels <= in_channels:
            raise ValueError(f"downsample needs out_channels > in_channels ({out_channels} <= {in_channels})")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv = Conv2d(conv3x3(in_channels, out_channels - in_channels, stride=2), dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x, training=False):
        _check_channels(x, self.in_channels, "downsample")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError("downsample needs even spatial size")
        y = concat([self.conv(x), F.max_pool2d(x, 2, 2)], axis=1)
        return F.relu(self.bn(y, training))

    def out_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"downsample: expected {self.in_channels} channels, got {c}")
        if h % 2 or w % 2:
            raise ShapeError(f"downsample needs even spatial size, got {h}x{w}")
        return (n, self.out_channels, h // 2, w // 2)

    def cost(self, shape):
        out = self.out_shape(shape)
        return self.conv.cost(shape) + self.bn.cost(out) + Cost(other=numel(shape) + numel(out))

    def receptive(self, rf):
        pooled = rf.grow(1, 1).stride(2, 2)
        return RF.max(self.conv.receptive(rf), pooled)


def downsample_block(x, block: DownsampleBlock, training=False):
    return block(x, training)


class UpsampleBlock(ConvBN):
    """Transposed 3x3 convolution with stride 2, then BN and ReLU."""

    def __init__(self, in_channels, out_channels, dtype=DEFAULT_DTYPE):
        super().__init__(deconv3x3(in_channels, out_channels), dtype=dtype)


class ProjectionLayer(Module):
    """Pointwise classifier followed by a learned x2 upsampling to input resolution."""

    def __init__(self, in_channels, num_classes, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.classifier = Conv2d(pointwise(in_channels, num_classes, bias=True), dtype)
        self.up = Conv2d(deconv3x3(num_classes, num_classes, bias=True), dtype)

    def forward(self, x, training=False):
        _check_channels(x, self.in_channels, "projection")
        return self.up(self.classifier(x))

    def out_shape(self, shape):
        return self.up.out_shape(self.classifier.out_shape(shape))

    def cost(self, shape):
        return self.classifier.cost(shape) + self.up.cost(self.classifier.out_shape(shape))

    def receptive(self, rf):
        return self.up.receptive(self.classifier.receptive(rf))


def initial_block(x, block: InitialBlock, training=False):
    return block(x, training)


def projection_layer(x, layer: ProjectionLayer):
    return layer(x)
