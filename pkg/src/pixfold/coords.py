"""Coordinate grids, Fourier features and per-stage pixel tensor initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import EqualLinear, Module, Parameter
from .ops import linear
from .tensor import ShapeError, Tensor, as_tensor, concat, get_default_dtype

__all__ = [
    "CoordGrid",
    "PixelTensor",
    "normalize_coords",
    "fourier_features",
    "PixelInit",
    "init_pixel_tensor",
    "reduce_before_fold",
]


@dataclass(frozen=True)
class CoordGrid:
    """All integer pixel coordinates (x, y) with 0 <= x < W, 0 <= y < H."""

    height: int
    width: int

    @property
    def coords(self) -> np.ndarray:
        """(H, W, 2) integer array holding (x, y) at [y, x]."""
        ys, xs = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([xs, ys], axis=-1)


@dataclass
class PixelTensor:
    """A (N, H, W, C) tensor tagged with its stage and how many folds it carries."""

    data: Tensor
    stage: int
    fold_level: int = 0

    @property
    def shape(self):
        return self.data.shape

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


def normalize_coords(grid: CoordGrid, dtype=None) -> np.ndarray:
    """Map pixel coordinates onto [-1, 1]: x' = 2x/(W-1) - 1, y' = 2y/(H-1) - 1.

    Computed as ``(2x - (W-1)) / (W-1)`` so mirrored pixels negate exactly.
    """
    if grid.height < 2 or grid.width < 2:
        raise ValueError(f"grid must be at least 2x2, got {grid.height}x{grid.width}")
    c = grid.coords.astype(np.float64)
    span = np.array([grid.width - 1, grid.height - 1], dtype=np.float64)
    return ((2.0 * c - span) / span).astype(dtype or get_default_dtype())


def fourier_features(basis, normed) -> Tensor:
    """sin((x', y') @ B) for a (2, d) basis; ``normed`` is (..., 2)."""
    basis = as_tensor(basis)
    normed = as_tensor(normed, basis)
    if basis.ndim != 2 or basis.shape[0] != 2:
        raise ShapeError(f"Fourier basis must be (2, d), got {basis.shape}")
    if normed.shape[-1] != 2:
        raise ShapeError(f"coordinates must have a trailing axis of 2, got {normed.shape}")
    return linear(normed, basis).sin()


class PixelInit(Module):
    """Builds E_i: Fourier features (+ coordinate embeddings at stage 0), projected to d."""

    def __init__(self, stage: int, resolution: int, dim: int, rng: np.random.Generator,
                 coord_embedding: bool = True):
        self.stage = stage
        self.resolution = resolution
        self.dim = dim
        self.fourier = Parameter(rng.standard_normal((2, dim)))
        use_table = stage == 0 and coord_embedding
        self.coord_embed = Parameter(0.02 * rng.standard_normal((resolution, resolution, dim))) if use_table else None
        self.proj = EqualLinear(2 * dim if use_table else dim, dim, rng)

    def forward(self, batch: int = 1) -> PixelTensor:
        grid = normalize_coords(CoordGrid(self.resolution, self.resolution), self.fourier.dtype)
        grid = np.ascontiguousarray(np.broadcast_to(grid, (batch, *grid.shape)))
        feats = fourier_features(self.fourier, Tensor(grid))
        if self.coord_embed is not None:
            table = self.coord_embed.reshape(1, *self.coord_embed.shape).broadcast_to(feats.shape)
            feats = concat([feats, table], axis=-1)
        return PixelTensor(self.proj(feats), self.stage, 0)


def init_pixel_tensor(stage: int, cfg, params, batch: int = 1) -> PixelTensor:
    """E_i for ``stage`` of a GeneratorConfig.

    ``params`` is either a :class:`PixelInit` or a mapping with keys
    ``fourier``, ``proj.weight``, ``proj.bias`` (and ``coord_embed`` at stage 0).
    """
    if not 0 <= stage < cfg.num_stages:
        raise ValueError(f"stage {stage} out of range for {cfg.num_stages} stages")
    if isinstance(params, PixelInit):
        return params(batch)
    res, dim = cfg.stage_resolutions[stage], cfg.init_dims[stage]
    module = PixelInit(stage, res, dim, np.random.default_rng(0), cfg.coord_embedding)
    expected = {name for name, _ in module.named_parameters()}
    missing = sorted(expected - set(params))
    if missing:
        raise KeyError(f"stage {stage} initialization is missing parameters {missing}")
    module.load_state_dict({k: params[k] for k in expected})
    return module(batch)


def reduce_before_fold(layer: EqualLinear, e: PixelTensor) -> PixelTensor:
    """Project E_i down to the fold width (32 in the reference config)."""
    return PixelTensor(layer(e.data), e.stage, e.fold_level)
