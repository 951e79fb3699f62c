"""Style-modulated convolutions and RGB heads."""

from __future__ import annotations

import math

import numpy as np

from .nn import EqualLinear, Module, Parameter
from .ops import conv2d, fused_leaky_relu, linear, transposed_conv2d
from .tensor import ShapeError, Tensor, as_tensor

__all__ = ["DEMOD_EPS", "modulate", "ModConv", "ToRGB", "affine_style"]

DEMOD_EPS = 1e-8


def modulate(kernel, styles, demodulate: bool = True, eps: float = DEMOD_EPS) -> Tensor:
    """Scale a ``(k,k,Cin,Cout)`` kernel by per-input-channel styles.

    ``styles`` of shape ``(Cin,)`` gives one kernel; ``(N, Cin)`` gives a
    per-sample stack ``(N,k,k,Cin,Cout)``.  With ``demodulate`` each output
    channel slice is divided by ``sqrt(sum(w'^2) + eps)``.
    """
    kernel = as_tensor(kernel)
    styles = as_tensor(styles, kernel)
    cin = kernel.shape[2]
    if styles.shape[-1] != cin:
        raise ShapeError(f"modulate: style length {styles.shape[-1]} != kernel input channels {cin}")
    if styles.ndim == 1:
        w = kernel * styles.reshape(1, 1, cin, 1)
        red = (0, 1, 2)
    else:
        n = styles.shape[0]
        w = kernel.reshape(1, *kernel.shape) * styles.reshape(n, 1, 1, cin, 1)
        red = (1, 2, 3)
    if demodulate:
        w = w * ((w * w).sum(axis=red, keepdims=True) + eps) ** -0.5
    return w


class ModConv(Module):
    """k x k modulated conv (optionally a stride-2 modulated transposed conv).

    Output = act(conv(x, demod(weight * s)) + bias) where ``s = affine(w)``.
    """

    def __init__(self, cin: int, cout: int, k: int, style_dim: int, rng: np.random.Generator,
                 demodulate: bool = True, activate: bool = True, up: bool = False):
        if k not in (1, 3):
            raise ValueError(f"ModConv kernel size must be 1 or 3, got {k}")
        self.cin, self.cout, self.k = cin, cout, k
        self.weight = Parameter(rng.standard_normal((k, k, cin, cout)))
        self.affine = EqualLinear(style_dim, cin, rng, bias_init=1.0)
        self.bias = Parameter(np.zeros(cout))
        self.scale = 1.0 / math.sqrt(k * k * cin)
        self.demodulate = demodulate
        self.activate = activate
        self.up = up
        self.fused = False

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.k, self.k, self.cin, self.cout)

    def _modulate_activations(self, x, s) -> Tensor:
        # conv(x * s, W) * d equals conv(x, demod(W * s)); the kernel stays batch-shared
        n = x.shape[0]
        weight = self.weight * self.scale
        x = x * s.reshape(n, 1, 1, self.cin)
        if self.up:
            out = transposed_conv2d(x, weight.swapaxes(2, 3), 2)
        else:
            out = conv2d(x, weight)
        if self.demodulate:
            wsq = (weight * weight).sum(axis=(0, 1))                   # (Cin, Cout)
            d = (linear(s * s, wsq, counted=False) + DEMOD_EPS) ** -0.5  # (N, Cout)
            out = out * d.reshape(n, 1, 1, self.cout)
        return out

    def styles(self, w) -> Tensor:
        return self.affine(w)

    def forward(self, x, w, styles=None) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.cin:
            raise ShapeError(f"ModConv: input channel axis 3 has {x.shape[-1]}, layer expects {self.cin}")
        s = self.affine(w) if styles is None else styles
        if s.ndim == 1:
            s = s.reshape(1, -1)
        if s.shape[0] != x.shape[0]:
            s = s.broadcast_to((x.shape[0], s.shape[1]))
        if self.fused:
            kern = modulate(self.weight * self.scale, s, self.demodulate)
            if self.up:
                out = transposed_conv2d(x, kern.swapaxes(3, 4), 2)
            else:
                out = conv2d(x, kern)
        else:
            out = self._modulate_activations(x, s)
        if self.activate:
            return fused_leaky_relu(out, self.bias)
        return out + self.bias


class ToRGB(ModConv):
    """1x1 modulated projection to 3 channels, no demodulation, no activation."""

    def __init__(self, cin: int, style_dim: int, rng: np.random.Generator):
        super().__init__(cin, 3, 1, style_dim, rng, demodulate=False, activate=False)


def affine_style(layer: ModConv, w) -> Tensor:
    """``s = A w + b`` for a layer's style affine."""
    return layer.affine(w)
