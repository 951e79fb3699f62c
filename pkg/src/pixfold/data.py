"""Image datasets (PNG folders, procedural blobs/textures) and the proxy Fréchet metric."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import DatasetConfig, sub_rng
from .ops import _conv_fwd

__all__ = [
    "Dataset",
    "load_png_folder",
    "synth_blobs",
    "synth_textures",
    "build_dataset",
    "to_uint8",
    "save_png",
    "make_grid",
    "FeatureExtractor",
    "feature_stats",
    "frechet_distance",
    "proxy_frechet",
]

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Images stacked as float32 (N, H, W, 3) in [-1, 1]."""

    images: np.ndarray
    source: str
    resolution: int
    seed: int | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != (self.resolution, self.resolution, 3):
            raise ValueError(f"dataset images must be (N,{self.resolution},{self.resolution},3), got {self.images.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.integers(0, len(self), size=n)
        return self.images[idx]


# -- ingestion ----------------------------------------------------------------


def _center_crop_resize(arr: np.ndarray, resolution: int) -> np.ndarray:
    h, w = arr.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[top : top + side, left : left + side]
    # nearest: sample the source pixel under each target pixel centre
    idx = ((np.arange(resolution) + 0.5) * side / resolution).astype(np.int64)
    return arr[idx][:, idx]


def _decode(path: Path, resolution: int) -> np.ndarray | None:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        log.warning("skipping unreadable image %s: %s", path, exc)
        return None
    arr = _center_crop_resize(arr, resolution)
    return arr.astype(np.float32) * np.float32(2.0 / 255.0) - np.float32(1.0)


def load_png_folder(path: str | Path, resolution: int, workers: int = 4) -> Dataset:
    """Decode every image in ``path`` (sorted by name), crop to square, resize, map to [-1, 1]."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.is_file())
    with ThreadPoolExecutor(max_workers=workers) as pool:
        decoded = list(pool.map(lambda p: _decode(p, resolution), files))
    images = [a for a in decoded if a is not None]
    if not images:
        raise ValueError(f"no readable images in {root}")
    return Dataset(np.stack(images), "png_folder", resolution)


def synth_blobs(count: int, resolution: int, seed: int = 0) -> Dataset:
    """1-3 coloured Gaussian blobs on black, random centres/colours/scales."""
    rng = sub_rng(seed, "data.synthetic_blobs")
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) + 0.5
    out = np.empty((count, resolution, resolution, 3), dtype=np.float32)
    for i in range(count):
        canvas = np.zeros((resolution, resolution, 3))
        for _ in range(rng.integers(1, 4)):
            cx, cy = rng.uniform(0.2, 0.8, size=2) * resolution
            sigma = rng.uniform(0.08, 0.22) * resolution
            color = rng.uniform(0.3, 1.0, size=3)
            g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
            canvas += g[..., None] * color
        out[i] = np.clip(canvas, 0.0, 1.0) * 2.0 - 1.0
    return Dataset(out, "synthetic_blobs", resolution, seed)


def synth_textures(count: int, resolution: int, seed: int = 0) -> Dataset:
    """Sums of two oriented sinusoidal gratings with random colours."""
    rng = sub_rng(seed, "data.synthetic_textures")
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) / resolution
    out = np.empty((count, resolution, resolution, 3), dtype=np.float32)
    for i in range(count):
        canvas = np.zeros((resolution, resolution, 3))
        for _ in range(2):
            theta = rng.uniform(0, math.pi)
            freq = rng.uniform(1.0, 6.0)
            phase = rng.uniform(0, 2 * math.pi)
            wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
            canvas += 0.5 * wave[..., None] * rng.uniform(-1.0, 1.0, size=3)
        out[i] = np.clip(canvas, -1.0, 1.0)
    return Dataset(out, "synthetic_textures", resolution, seed)


def build_dataset(cfg: DatasetConfig) -> Dataset:
    cfg.validate()
    if cfg.source == "png_folder":
        return load_png_folder(cfg.path, cfg.resolution)
    if cfg.source == "synthetic_blobs":
        return synth_blobs(cfg.count, cfg.resolution, cfg.seed)
    return synth_textures(cfg.count, cfg.resolution, cfg.seed)


# -- PNG output -----------------------------------------------------------------


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Inverse of the ingestion map ``v -> 2v/255 - 1``, rounded and clipped."""
    return np.clip(np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Write one (H, W, 3) image in [-1, 1] as 8-bit RGB."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"save_png expects (H,W,3), got {image.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


def make_grid(images: np.ndarray, ncol: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile (N, H, W, 3) images into one image, padding with -1 (black)."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    ncol = ncol or int(math.ceil(math.sqrt(n)))
    nrow = int(math.ceil(n / ncol))
    grid = np.full((nrow * (h + pad) + pad, ncol * (w + pad) + pad, c), -1.0, dtype=images.dtype)
    for i in range(n):
        r, q = divmod(i, ncol)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[y : y + h, x : x + w] = images[i]
    return grid


# -- proxy Fréchet distance ----------------------------------------------------


class FeatureExtractor:
    """Frozen random conv stack: three stride-2 3x3 convs with ReLU, then global average pool.

    Weights come from a named seed, so features are identical across runs.
    Values are only meaningful relative to each other (a proxy, not Inception FID).
    """

    widths = (3, 16, 32, 64)

    def __init__(self, seed: int = 0):
        rng = sub_rng(seed, "metrics.feature_extractor")
        self.kernels = []
        for cin, cout in zip(self.widths[:-1], self.widths[1:]):
            w = rng.standard_normal((3, 3, cin, cout)) * math.sqrt(2.0 / (9 * cin))
            self.kernels.append(w)
        self.biases = [rng.uniform(-0.1, 0.1, size=c) for c in self.widths[1:]]

    @property
    def dim(self) -> int:
        return self.widths[-1]

    def __call__(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"feature extractor expects (N,H,W,3), got {images.shape}")
        feats = []
        for start in range(0, images.shape[0], batch_size):
            x = images[start : start + batch_size]
            for w, b in zip(self.kernels, self.biases):
                x = np.maximum(_conv_fwd(x, w, 2, 1) + b, 0.0)
            feats.append(x.mean(axis=(1, 2)))
        return np.concatenate(feats, axis=0)


def feature_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if n < max(2, d // 2):
        raise ValueError(f"need at least {max(2, d // 2)} samples for a {d}-dim covariance, got {n}")
    return features.mean(axis=0), np.cov(features, rowvar=False)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    tr (S1 S2)^(1/2) is evaluated as tr (A S2 A)^(1/2) with A = S1^(1/2), which
    only needs symmetric eigendecompositions; negative eigenvalues are clamped.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    a = _sqrt_psd(s1)
    inner = a @ s2 @ a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_cross)
    return max(value, 0.0)


def proxy_frechet(real, fake, extractor: FeatureExtractor | None = None) -> float:
    """proxy-FID between two image sets (Dataset or (N,H,W,3) arrays in [-1, 1])."""
    extractor = extractor or FeatureExtractor()
    real = real.images if isinstance(real, Dataset) else real
    fake = fake.images if isinstance(fake, Dataset) else fake
    mu1, s1 = feature_stats(extractor(real))
    mu2, s2 = feature_stats(extractor(fake))
    return frechet_distance(mu1, s1, mu2, s2)
