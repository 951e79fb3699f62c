"""Convolution-family primitives on channel-last (N, H, W, C) tensors.

conv2d, conv_transpose2d and conv2d_weight_grad are closed under
differentiation: each one's backward is expressed with the other two, which
keeps second-order gradients (R1) available through every conv layer.

Kernels are laid out ``(k, k, Cin, Cout)``.  A leading batch axis
``(N, k, k, Cin, Cout)`` selects per-sample kernels (modulated convolution).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Op, ShapeError, Tensor, LeakyReLU, MatMul, as_tensor

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "transposed_conv2d",
    "conv2d_weight_grad",
    "linear",
    "leaky_relu",
    "fused_leaky_relu",
    "avg_downsample2x",
    "upsample_nearest",
    "sum_pool",
    "mac_counter",
    "MacCounter",
]


class MacCounter:
    """Accumulates multiplies executed by conv/linear kernels while active."""

    def __init__(self):
        self.total = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.total += int(n)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)


_counter: list[MacCounter | None] = [None]


@contextlib.contextmanager
def mac_counter():
    """Count multiplies inside conv/linear kernels for the enclosed code."""
    prev = _counter[0]
    counter = MacCounter()
    _counter[0] = counter
    try:
        yield counter
    finally:
        _counter[0] = prev


def _count(kind: str, n: int) -> None:
    if _counter[0] is not None:
        _counter[0].add(kind, n)


# ---------------------------------------------------------------------------
# raw numpy kernels
# ---------------------------------------------------------------------------


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, what: str) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{what}: input must be rank 4 (N,H,W,C), got {x.shape}")
    if w.ndim not in (4, 5):
        raise ShapeError(f"{what}: kernel must be (k,k,Cin,Cout) or (N,k,k,Cin,Cout), got {w.shape}")
    kh, kw, cin, cout = w.shape[-4:]
    if kh != kw:
        raise ShapeError(f"{what}: kernel axis 1 ({kw}) must equal axis 0 ({kh})")
    if w.ndim == 5 and w.shape[0] != x.shape[0]:
        raise ShapeError(f"{what}: per-sample kernel batch axis {w.shape[0]} != input batch {x.shape[0]}")
    return kh, cin, cout, w.ndim


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    n, h, w, c = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        return x.reshape(n, h * w, c), ho, wo
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # n, h', w', c, k, k
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho * wo, k * k * c)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        return cols.reshape(n, h, w, c)
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, :, i, j]
    if padding:
        out = out[:, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def _conv_fwd(x, w, stride, padding):
    k, cin, cout, wdim = _check_conv(x, w, "conv2d")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channel axis 3 has {x.shape[3]}, kernel expects {cin}")
    cols, ho, wo = _im2col(x, k, stride, padding)
    n = x.shape[0]
    out = np.empty((n, ho * wo, cout), dtype=np.result_type(x, w))
    if wdim == 4:
        wm = w.reshape(k * k * cin, cout)
        for i in range(n):
            np.matmul(cols[i], wm, out=out[i])
    else:
        for i in range(n):
            np.matmul(cols[i], w[i].reshape(k * k * cin, cout), out=out[i])
    return out.reshape(n, ho, wo, cout)


def _conv_bwd_input(g, w, stride, padding, in_hw):
    """Adjoint of conv2d w.r.t. its input (transposed convolution)."""
    k, cin, cout, wdim = _check_conv(g, w, "conv_transpose2d")
    if g.shape[3] != cout:
        raise ShapeError(f"conv_transpose2d: input channel axis 3 has {g.shape[3]}, kernel expects {cout}")
    n, ho, wo, _ = g.shape
    h, wd = in_hw
    if _out_size(h, k, stride, padding) != ho or _out_size(wd, k, stride, padding) != wo:
        raise ShapeError(f"conv_transpose2d: output size {in_hw} inconsistent with input {g.shape[1:3]}")
    gm = g.reshape(n, ho * wo, cout)
    cols = np.empty((n, ho * wo, k * k * cin), dtype=np.result_type(g, w))
    if wdim == 4:
        wt = w.reshape(k * k * cin, cout).T
        for i in range(n):
            np.matmul(gm[i], wt, out=cols[i])
    else:
        for i in range(n):
            np.matmul(gm[i], w[i].reshape(k * k * cin, cout).T, out=cols[i])
    return _col2im(cols, (n, h, wd, cin), k, stride, padding)


def _conv_bwd_weight(x, g, k, stride, padding, per_sample):
    n, _, _, cin = x.shape
    cout = g.shape[3]
    cols, ho, wo = _im2col(x, k, stride, padding)
    if (ho, wo) != g.shape[1:3]:
        raise ShapeError(f"conv2d_weight_grad: grad spatial {g.shape[1:3]} != expected {(ho, wo)}")
    gm = g.reshape(n, ho * wo, cout)
    if per_sample:
        out = np.empty((n, k * k * cin, cout), dtype=np.result_type(x, g))
        for i in range(n):
            np.matmul(cols[i].T, gm[i], out=out[i])
        return out.reshape(n, k, k, cin, cout)
    out = cols.reshape(n * ho * wo, -1).T @ gm.reshape(n * ho * wo, cout)
    return out.reshape(k, k, cin, cout)


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------


class Conv2d(Op):
    stride: int
    padding: int

    def forward(self, x, w):
        out = _conv_fwd(x, w, self.stride, self.padding)
        k, cin, cout = w.shape[-3], w.shape[-2], w.shape[-1]
        _count("conv", out.shape[0] * out.shape[1] * out.shape[2] * k * k * cin * cout)
        return out

    def backward(self, g, needs):
        x, w = self.inputs
        gx = conv_transpose2d(g, w, self.stride, self.padding, x.shape[1:3]) if needs[0] else None
        gw = conv2d_weight_grad(x, g, w.shape[-4], self.stride, self.padding, w.ndim == 5) if needs[1] else None
        return gx, gw


class ConvTranspose2d(Op):
    stride: int
    padding: int
    out_hw: tuple[int, int]

    def forward(self, g, w):
        out = _conv_bwd_input(g, w, self.stride, self.padding, self.out_hw)
        k, cin, cout = w.shape[-3], w.shape[-2], w.shape[-1]
        _count("conv_transpose", g.shape[0] * g.shape[1] * g.shape[2] * k * k * cin * cout)
        return out

    def backward(self, h, needs):
        g, w = self.inputs
        gg = conv2d(h, w, self.stride, self.padding) if needs[0] else None
        gw = conv2d_weight_grad(h, g, w.shape[-4], self.stride, self.padding, w.ndim == 5) if needs[1] else None
        return gg, gw


class Conv2dWeightGrad(Op):
    k: int
    stride: int
    padding: int
    per_sample: bool

    def forward(self, x, g):
        return _conv_bwd_weight(x, g, self.k, self.stride, self.padding, self.per_sample)

    def backward(self, h, needs):
        x, g = self.inputs
        gx = conv_transpose2d(g, h, self.stride, self.padding, x.shape[1:3]) if needs[0] else None
        gg = conv2d(x, h, self.stride, self.padding) if needs[1] else None
        return gx, gg


def conv2d(x, kernel, stride: int = 1, padding: int | None = None, bias=None) -> Tensor:
    """Direct cross-correlation ``out[n,y,x,o] = sum x[n,y*s+i-p,x*s+j-p,c] k[i,j,c,o]``.

    ``padding=None`` selects "same" padding ``(k-1)//2`` for odd kernels.
    """
    kernel = as_tensor(kernel)
    k = kernel.shape[-4]
    if padding is None:
        if k % 2 == 0:
            raise ShapeError(f"conv2d: same-padding needs an odd kernel, got k={k}")
        padding = (k - 1) // 2
    out = Conv2d.apply(x, kernel, stride=int(stride), padding=int(padding))
    if bias is not None:
        out = out + as_tensor(bias, out)
    return out


def conv_transpose2d(x, kernel, stride: int, padding: int, out_hw) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input, producing spatial size ``out_hw``.

    ``kernel`` is the forward conv kernel ``(k,k,Ca,Cb)``; ``x`` carries Cb
    channels and the result carries Ca.
    """
    return ConvTranspose2d.apply(x, kernel, stride=int(stride), padding=int(padding),
                                 out_hw=(int(out_hw[0]), int(out_hw[1])))


def transposed_conv2d(x, kernel, stride: int = 2) -> Tensor:
    """Stride-``stride`` transposed convolution that multiplies spatial size by ``stride``."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    k = kernel.shape[-4]
    if k % 2 == 0:
        raise ShapeError(f"transposed_conv2d: kernel size must be odd, got {k}")
    h, w = x.shape[1], x.shape[2]
    return conv_transpose2d(x, kernel, stride, (k - 1) // 2, (h * stride, w * stride))


def conv2d_weight_grad(x, g, k: int, stride: int, padding: int, per_sample: bool = False) -> Tensor:
    return Conv2dWeightGrad.apply(x, g, k=int(k), stride=int(stride), padding=int(padding),
                                  per_sample=bool(per_sample))


class Linear(Op):
    """Affine-free map over the last axis, computed one leading index at a time."""

    counted: bool = True

    def forward(self, x, w):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"linear: input last axis has {x.shape[-1]}, weight expects {w.shape[0]}")
        lead = x.shape[:-1]
        n = lead[0] if lead else 1
        xm = x.reshape(n, -1, w.shape[0])
        out = np.empty((n, xm.shape[1], w.shape[1]), dtype=np.result_type(x, w))
        for i in range(n):
            np.matmul(xm[i], w, out=out[i])
        if self.counted:
            _count("linear", xm.shape[0] * xm.shape[1] * w.shape[0] * w.shape[1])
        return out.reshape(*lead, w.shape[1])

    def backward(self, g, needs):
        x, w = self.inputs
        gx = Linear.apply(g, w.transpose(), counted=self.counted) if needs[0] else None
        gw = None
        if needs[1]:
            gw = MatMul.apply(x.reshape(-1, w.shape[0]).transpose(), g.reshape(-1, w.shape[1]))
        return gx, gw


def linear(x, weight, bias=None, counted: bool = True) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``.

    ``counted=False`` keeps bookkeeping arithmetic (demodulation) out of MAC counts.
    """
    out = Linear.apply(x, weight, counted=counted)
    if bias is not None:
        out = out + as_tensor(bias, out)
    return out


def leaky_relu(x, slope: float = 0.2, scale: float = 1.0, bias=None) -> Tensor:
    """``scale * (x if x >= 0 else slope * x)`` with an optional per-channel bias added first."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    if bias is not None:
        x = x + as_tensor(bias, x)
    out = LeakyReLU.apply(x, slope=float(slope))
    if scale != 1.0:
        out = out * scale
    return out


def fused_leaky_relu(x, bias=None) -> Tensor:
    """Bias add, leaky ReLU (slope 0.2), then gain sqrt(2)."""
    return leaky_relu(x, 0.2, math.sqrt(2.0), bias)


class UpsampleNearest(Op):
    factor: int

    def forward(self, x):
        n, h, w, c = x.shape
        f = self.factor
        out = np.broadcast_to(x[:, :, None, :, None, :], (n, h, f, w, f, c))
        return out.reshape(n, h * f, w * f, c)

    def backward(self, g, needs):
        return (sum_pool(g, self.factor),)


class SumPool(Op):
    factor: int

    def forward(self, x):
        n, h, w, c = x.shape
        f = self.factor
        if h % f:
            raise ShapeError(f"sum_pool: axis 1 extent {h} not divisible by {f}")
        if w % f:
            raise ShapeError(f"sum_pool: axis 2 extent {w} not divisible by {f}")
        return x.reshape(n, h // f, f, w // f, f, c).sum(axis=(2, 4))

    def backward(self, g, needs):
        return (upsample_nearest(g, self.factor),)


def upsample_nearest(x, factor: int) -> Tensor:
    return UpsampleNearest.apply(x, factor=int(factor))


def sum_pool(x, factor: int) -> Tensor:
    return SumPool.apply(x, factor=int(factor))


def avg_downsample2x(x) -> Tensor:
    """Mean over non-overlapping 2x2 patches; H and W must be even."""
    return sum_pool(x, 2) * 0.25
