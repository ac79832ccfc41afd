"""Convolutional feature extractor and the channel bottleneck."""

from __future__ import annotations

import numpy as np

from ..engine import nn, relu
from ..engine.tensor import Tensor


class ConvBlock(nn.Module):
    """conv3x3 -> norm -> relu -> conv3x3 (stride 2) -> norm -> relu."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, frozen_bn: bool, padding_mode: str):
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng, padding=1, bias=False, padding_mode=padding_mode)
        self.norm1 = nn.BatchNorm2d(c_out, frozen=frozen_bn)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng, stride=2, padding=1, bias=False, padding_mode=padding_mode)
        self.norm2 = nn.BatchNorm2d(c_out, frozen=frozen_bn)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.norm1(self.conv1(x)))
        return relu(self.norm2(self.conv2(x)))


class Backbone(nn.Module):
    """Stack of stride-2 blocks; the output stride is ``2 ** len(channels)``."""

    def __init__(
        self,
        channels: tuple[int, ...],
        rng: np.random.Generator,
        frozen_bn: bool = False,
        padding_mode: str = "zeros",
    ):
        if not channels:
            raise ValueError("backbone needs at least one block")
        self.blocks = nn.ModuleList()
        c_in = 3
        for c in channels:
            self.blocks.append(ConvBlock(c_in, c, rng, frozen_bn, padding_mode))
            c_in = c
        self.out_channels = c_in
        self.stride = 2 ** len(channels)

    def forward(self, img: Tensor) -> Tensor:
        h, w = img.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image extents {h}x{w} are not divisible by the stride {self.stride}")
        x = img
        for block in self.blocks:
            x = block(x)
        return x


class Bottleneck(nn.Module):
    """1x1 convolution from backbone channels to the transformer width."""

    def __init__(self, c_in: int, d: int, rng: np.random.Generator):
        self.proj = nn.Conv2d(c_in, d, 1, rng)

    def forward(self, f: Tensor) -> Tensor:
        return self.proj(f)
