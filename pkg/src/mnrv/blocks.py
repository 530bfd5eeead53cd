"""Composite layers: convolutions with state, GRN, ConvNeXt and upsample blocks.

Every block is a plain object holding parameter Tensors; calling it runs the
forward pass through the autodiff graph. `parameters()` returns tensors in a
fixed definition order — serialization and the optimizer both rely on that
order being stable.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


class Block:
    """Base for parameterized layers; children register in definition order."""

    def __init__(self):
        self._params: list[Tensor] = []
        self._children: list[Block] = []

    def _param(self, data) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params.append(t)
        return t

    def _child(self, block: "Block") -> "Block":
        self._children.append(block)
        return block

    def parameters(self) -> list[Tensor]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.parameters())
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())


def _conv_weight(rng: np.random.Generator, cout: int, cin_g: int, k: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(cin_g * k * k)
    return rng.uniform(-bound, bound, size=(cout, cin_g, k, k))


class Conv2d(Block):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1):
        super().__init__()
        if cin % groups or cout % groups:
            raise ConfigError(f"channels {cin}->{cout} not divisible by groups={groups}")
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = self._param(_conv_weight(rng, cout, cin // groups, k))
        self.bias = self._param(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding, groups=self.groups)


class LayerNormChannels(Block):
    """Per-position normalization across channels with learned affine."""

    def __init__(self, c: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = self._param(np.ones(c))
        self.beta = self._param(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm_channels(x, self.gamma, self.beta, eps=self.eps)


class GRN(Block):
    """Global response normalization.

    Each channel is rescaled by its spatial L2 norm relative to the mean norm
    across channels, with a learned affine and a residual path. Zero-initialized
    affine makes the layer start as the identity.
    """

    def __init__(self, c: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = self._param(np.zeros(c))
        self.beta = self._param(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        c = x.shape[0]
        norm = ad.sqrt(ad.tsum(ad.mul(x, x), axis=(1, 2), keepdims=True))  # (C,1,1)
        rel = ad.div(norm, ad.add(ad.tmean(norm, axis=0, keepdims=True), self.eps))
        scaled = ad.mul(x, rel)
        gamma = ad.reshape(self.gamma, (c, 1, 1))
        beta = ad.reshape(self.beta, (c, 1, 1))
        return ad.add(ad.add(ad.mul(gamma, scaled), beta), x)


class ConvNeXtBlock(Block):
    """Residual block: depthwise 7x7 -> channel norm -> 1x1 expand x4 ->
    gelu -> GRN -> 1x1 project. Shape-preserving; GRN can be disabled."""

    EXPANSION = 4
    DW_KERNEL = 7

    def __init__(self, c: int, rng: np.random.Generator, use_grn: bool = True):
        super().__init__()
        k = self.DW_KERNEL
        self.dwconv = self._child(Conv2d(c, c, k, rng, padding=k // 2, groups=c))
        self.norm = self._child(LayerNormChannels(c))
        self.expand = self._child(Conv2d(c, self.EXPANSION * c, 1, rng))
        self.grn = self._child(GRN(self.EXPANSION * c)) if use_grn else None
        self.project = self._child(Conv2d(self.EXPANSION * c, c, 1, rng))

    def __call__(self, x: Tensor) -> Tensor:
        y = self.dwconv(x)
        y = self.norm(y)
        y = self.expand(y)
        y = ad.gelu(y)
        if self.grn is not None:
            y = self.grn(y)
        y = self.project(y)
        return ad.add(x, y)


class UpsampleBlock(Block):
    """Decoder unit: k x k conv to C_out*s^2 channels, pixel shuffle by s,
    gelu. Multiplies both spatial dimensions by exactly s."""

    def __init__(self, cin: int, cout: int, k: int, s: int, rng: np.random.Generator):
        super().__init__()
        if k % 2 == 0 or k < 1:
            raise ConfigError(f"upsample block kernel must be odd, got {k}")
        if s < 1:
            raise ConfigError(f"upsample factor must be positive, got {s}")
        self.s = s
        self.conv = self._child(Conv2d(cin, cout * s * s, k, rng, padding=k // 2))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.gelu(ad.pixel_shuffle(self.conv(x), self.s))


class OutputHead(Block):
    """1x1 projection to RGB squashed into (0,1) by a sigmoid."""

    def __init__(self, cin: int, rng: np.random.Generator):
        super().__init__()
        self.conv = self._child(Conv2d(cin, 3, 1, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.conv(x))
