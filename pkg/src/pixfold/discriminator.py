"""Residual discriminator with a minibatch standard-deviation layer."""

from __future__ import annotations

import math

import numpy as np

from .config import DiscriminatorConfig, sub_rng
from .nn import EqualConv2d, EqualLinear, Module
from .ops import avg_downsample2x
from .tensor import ShapeError, Tensor, as_tensor, concat

__all__ = ["minibatch_stddev", "ResidualBlock", "Discriminator"]


def minibatch_stddev(x, group_size: int = 4, eps: float = 1e-8) -> Tensor:
    """Append one channel: mean over (H, W, C) of per-group feature stddevs.

    The group size is clamped to N; N must be divisible by the result.
    """
    x = as_tensor(x)
    n, h, w, c = x.shape
    if n == 0:
        raise ShapeError("minibatch_stddev: empty batch")
    g = min(group_size, n)
    if n % g:
        raise ShapeError(f"minibatch_stddev: batch axis 0 ({n}) not divisible by group size {g}")
    y = x.reshape(g, n // g, h, w, c)
    y = y - y.mean(axis=0, keepdims=True)
    y = ((y * y).mean(axis=0) + eps).sqrt()          # (n/g, h, w, c)
    y = y.mean(axis=(1, 2, 3), keepdims=True)        # (n/g, 1, 1, 1)
    y = y.reshape(1, n // g, 1, 1, 1).broadcast_to((g, n // g, h, w, 1)).reshape(n, h, w, 1)
    return concat([x, y], axis=-1)


class ResidualBlock(Module):
    """conv3x3-act-conv3x3-act-down on the main path, down-conv1x1 on the skip, sum / sqrt(2)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = EqualConv2d(cin, cin, 3, rng, activate=True)
        self.conv2 = EqualConv2d(cin, cout, 3, rng, activate=True)
        self.skip = EqualConv2d(cin, cout, 1, rng, bias=False)

    def forward(self, x):
        x = as_tensor(x)
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"residual block needs even spatial extents, got {x.shape[1:3]}")
        main = avg_downsample2x(self.conv2(self.conv1(x)))
        skip = self.skip(avg_downsample2x(x))
        return (main + skip) * (1.0 / math.sqrt(2.0))


class Discriminator(Module):
    def __init__(self, cfg: DiscriminatorConfig, seed: int = 0, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng or sub_rng(seed, "init.discriminator")
        res = cfg.input_resolution
        self.from_rgb = EqualConv2d(3, cfg.channels_at(res), 1, rng, activate=True)
        self.blocks = []
        while res > 4:
            self.blocks.append(ResidualBlock(cfg.channels_at(res), cfg.channels_at(res // 2), rng))
            res //= 2
        c4 = cfg.channels_at(4)
        self.final_conv = EqualConv2d(c4 + 1, c4, 3, rng, activate=True)
        self.final_linear = EqualLinear(c4 * 16, c4, rng, activate=True)
        self.out = EqualLinear(c4, 1, rng)

    def forward(self, images) -> Tensor:
        x = as_tensor(images)
        r = self.cfg.input_resolution
        if x.ndim != 4 or x.shape[1:] != (r, r, 3):
            raise ShapeError(f"discriminator expects (N,{r},{r},3) images, got {x.shape}")
        x = self.from_rgb(x)
        for block in self.blocks:
            x = block(x)
        x = minibatch_stddev(x, self.cfg.mbstd_group)
        x = self.final_conv(x)
        x = self.final_linear(x.reshape(x.shape[0], -1))
        return self.out(x)
