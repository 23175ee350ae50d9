"""Parameter-holding layers and the hooks static analysis relies on.

Every layer answers four questions without running arithmetic:
``out_shape``, ``param_count``, ``cost`` and ``receptive``. The analyzer
composes those answers; tests compare them against executed forwards and
against the parameter registry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn as F
from .nn import Conv2dSpec
from .tensor import DEFAULT_DTYPE, Tensor


@dataclass(frozen=True)
class Cost:
    macs: int = 0
    other: int = 0

    def __add__(self, other):
        return Cost(self.macs + other.macs, self.other + other.other)


@dataclass(frozen=True)
class RF:
    """Receptive-field state: footprint size and input-pixel jump per axis."""

    size_h: float = 1
    size_w: float = 1
    jump_h: float = 1
    jump_w: float = 1

    def grow(self, ext_h, ext_w):
        return RF(self.size_h + ext_h * self.jump_h, self.size_w + ext_w * self.jump_w,
                  self.jump_h, self.jump_w)

    def stride(self, sh, sw):
        return RF(self.size_h, self.size_w, self.jump_h * sh, self.jump_w * sw)

    @staticmethod
    def max(*rfs):
        return RF(max(r.size_h for r in rfs), max(r.size_w for r in rfs),
                  rfs[0].jump_h, rfs[0].jump_w)


def numel(shape):
    return int(np.prod(shape))


class Module:
    """Minimal container that registers parameters and sub-modules in order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for cname, child in self._children.items():
            yield from child.named_modules(f"{prefix}{cname}.")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x, training=False):
        raise NotImplementedError

    # analysis hooks; composites override
    def param_count(self):
        return sum(child.param_count() for child in self._children.values())

    def out_shape(self, shape):
        raise NotImplementedError

    def cost(self, shape):
        raise NotImplementedError

    def receptive(self, rf: RF) -> RF:
        raise NotImplementedError


class Container(Module):
    """Ordered sequence of sub-modules applied one after another."""

    def __init__(self, items=()):
        super().__init__()
        for name, mod in items:
            setattr(self, name, mod)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def forward(self, x, training=False):
        for mod in self:
            x = mod(x, training)
        return x

    def out_shape(self, shape):
        for mod in self:
            shape = mod.out_shape(shape)
        return shape

    def cost(self, shape):
        total = Cost()
        for mod in self:
            total = total + mod.cost(shape)
            shape = mod.out_shape(shape)
        return total

    def receptive(self, rf):
        for mod in self:
            rf = mod.receptive(rf)
        return rf


class Conv2d(Module):
    def __init__(self, spec: Conv2dSpec, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        self.weight = Tensor(np.zeros(spec.weight_shape, dtype=dtype), requires_grad=True)
        if spec.bias:
            self.bias = Tensor(np.zeros((1, spec.out_channels, 1, 1), dtype=dtype), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x, training=False):
        s = self.spec
        if s.transposed:
            return F.conv_transpose2d(x, self.weight, self.bias, s.stride, s.padding,
                                      s.output_padding, s.dilation)
        return F.conv2d(x, self.weight, self.bias, s.stride, s.padding, s.dilation, s.groups)

    def param_count(self):
        return self.spec.param_count()

    def out_shape(self, shape):
        n, c, h, w = shape
        if c != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} channels, got {c}")
        return (n, self.spec.out_channels, *self.spec.output_hw(h, w))

    def cost(self, shape):
        return Cost(macs=self.spec.macs(shape))

    def receptive(self, rf):
        s = self.spec
        (kh, kw), (sh, sw) = s.kernel, s.stride
        if s.transposed:
            # each output pixel reads ceil(k/s) input positions per axis
            grown = rf.grow(math.ceil(kh / sh) - 1, math.ceil(kw / sw) - 1)
            return grown.stride(1 / sh, 1 / sw)
        r = s.dilation
        return rf.grow(r * (kh - 1), r * (kw - 1)).stride(sh, sw)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.stats_ready = False

    def reset_stats(self):
        self.running_mean[:] = 0
        self.running_var[:] = 1
        self.stats_ready = True

    def forward(self, x, training=False):
        if not training and not self.stats_ready:
            raise RuntimeError("batch norm used in eval mode before its running statistics were set")
        out = F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training, self.momentum, self.eps)
        if training:
            self.stats_ready = True
        return out

    def param_count(self):
        return 2 * self.channels

    def out_shape(self, shape):
        return shape

    def cost(self, shape):
        return Cost(other=numel(shape))

    def receptive(self, rf):
        return rf


class ConvBN(Module):
    """Convolution, batch norm, and an optional ReLU."""

    def __init__(self, spec: Conv2dSpec, act=True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv = Conv2d(spec, dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype=dtype)
        self.act = act

    def forward(self, x, training=False):
        y = self.bn(self.conv(x, training), training)
        return F.relu(y) if self.act else y

    def out_shape(self, shape):
        return self.conv.out_shape(shape)

    def cost(self, shape):
        out = self.out_shape(shape)
        extra = Cost(other=numel(out)) if self.act else Cost()
        return self.conv.cost(shape) + self.bn.cost(out) + extra

    def receptive(self, rf):
        return self.conv.receptive(rf)


def pointwise(cin, cout, bias=False):
    return Conv2dSpec(cin, cout, kernel=(1, 1), bias=bias)


def depthwise(channels, kernel, dilation=1, stride=1):
    kh, kw = kernel
    return Conv2dSpec(channels, channels, kernel=(kh, kw), stride=stride,
                      padding=(dilation * (kh - 1) // 2, dilation * (kw - 1) // 2),
                      dilation=dilation, groups=channels)


def conv3x3(cin, cout, stride=1, bias=False):
    return Conv2dSpec(cin, cout, kernel=(3, 3), stride=stride, padding=(1, 1), bias=bias)


def deconv3x3(cin, cout, bias=False):
    return Conv2dSpec(cin, cout, kernel=(3, 3), stride=2, padding=1, output_padding=1,
                      bias=bias, transposed=True)
