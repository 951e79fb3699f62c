"""Pixel folding (space-to-depth) and unfolding (depth-to-space).

Both are parameter-free permutations.  A ``k x k`` patch at folded position
``(y, x)`` is packed patch-offset-major::

    folded[n, y, x, (dy*k + dx)*C + c] == t[n, y*k + dy, x*k + dx, c]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Op, ShapeError, Tensor

__all__ = ["FoldSpec", "fold", "unfold", "fold_array", "unfold_array"]


@dataclass(frozen=True)
class FoldSpec:
    k: int = 2

    def __post_init__(self):
        if int(self.k) < 2:
            raise ValueError(f"fold scale must be >= 2, got {self.k}")


def _k(spec) -> int:
    if isinstance(spec, FoldSpec):
        return spec.k
    return FoldSpec(int(spec)).k


def fold_array(a: np.ndarray, k: int) -> np.ndarray:
    if a.ndim != 4:
        raise ShapeError(f"fold expects (N,H,W,C), got {a.shape}")
    n, h, w, c = a.shape
    if h % k:
        raise ShapeError(f"fold: axis 1 (H={h}) not divisible by k={k}")
    if w % k:
        raise ShapeError(f"fold: axis 2 (W={w}) not divisible by k={k}")
    out = a.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(out).reshape(n, h // k, w // k, k * k * c)


def unfold_array(a: np.ndarray, k: int) -> np.ndarray:
    if a.ndim != 4:
        raise ShapeError(f"unfold expects (N,H,W,C), got {a.shape}")
    n, h, w, c = a.shape
    if c % (k * k):
        raise ShapeError(f"unfold: axis 3 (C={c}) not divisible by k^2={k * k}")
    out = a.reshape(n, h, w, k, k, c // (k * k)).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(out).reshape(n, h * k, w * k, c // (k * k))


class Fold(Op):
    k: int

    def forward(self, a):
        return fold_array(a, self.k)

    def backward(self, g, needs):
        return (Unfold.apply(g, k=self.k),)


class Unfold(Op):
    k: int

    def forward(self, a):
        return unfold_array(a, self.k)

    def backward(self, g, needs):
        return (Fold.apply(g, k=self.k),)


def fold(t, spec: FoldSpec | int = 2) -> Tensor:
    """Pack each ``k x k`` spatial patch into the channel axis: (N,H,W,C) -> (N,H/k,W/k,C*k^2)."""
    return Fold.apply(t, k=_k(spec))


def unfold(t, spec: FoldSpec | int = 2) -> Tensor:
    """Exact inverse of :func:`fold`: (N,H,W,C) -> (N,H*k,W*k,C/k^2)."""
    return Unfold.apply(t, k=_k(spec))
