"""Declarative configuration for the generator, discriminator, training and runs."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

__all__ = [
    "BLOCK_VARIANTS",
    "ConfigError",
    "GeneratorConfig",
    "DiscriminatorConfig",
    "TrainConfig",
    "DatasetConfig",
    "RunConfig",
    "reference_config",
    "toy_config",
    "load_run_config",
    "config_digest",
    "sub_rng",
]

BLOCK_VARIANTS = (
    "fold_unfold",
    "fold_deconv",
    "downsample_deconv",
    "fold_deconv_sc",
    "downsample_deconv_sc",
)


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    """Architecture of the multi-stage generator.

    ``block_channels`` is the trunk width of each stage's generation block;
    after an unfold the width drops to ``trunk / fold_scale**2``.
    """

    stage_resolutions: list[int] = field(default_factory=lambda: [16, 64, 256])
    init_dims: list[int] = field(default_factory=lambda: [512, 512, 128])
    block_channels: list[int] = field(default_factory=lambda: [512, 512, 128])
    fold_width: int = 32
    fold_scale: int = 2
    block_variant: str = "fold_unfold"
    latent_dim: int = 512
    mapping_depth: int = 8
    mapping_lr_mul: float = 0.01
    coord_embedding: bool = True
    multistage_connection: bool = True

    @property
    def num_stages(self) -> int:
        return len(self.stage_resolutions)

    @property
    def final_resolution(self) -> int:
        return self.stage_resolutions[-1]

    @property
    def uses_fold(self) -> bool:
        return not self.block_variant.startswith("downsample")

    @property
    def uses_deconv(self) -> bool:
        return "deconv" in self.block_variant

    @property
    def shape_consistent(self) -> bool:
        return self.block_variant.endswith("_sc")

    def prev_fold_count(self, stage: int) -> int:
        """Extra folds applied to the previous stage's features so they meet E_i^f (0 when ratio is k^2)."""
        if stage == 0:
            return 0
        ratio = self.stage_resolutions[stage] // self.stage_resolutions[stage - 1]
        return 0 if ratio == self.fold_scale ** 2 else 1

    def validate(self) -> "GeneratorConfig":
        k = self.fold_scale
        n = self.num_stages
        if n < 1:
            raise ConfigError("at least one stage is required")
        if len(self.init_dims) != n or len(self.block_channels) != n:
            raise ConfigError("stage_resolutions, init_dims and block_channels must have equal length")
        if k < 2:
            raise ConfigError(f"fold_scale must be >= 2, got {k}")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ConfigError(f"unknown block_variant {self.block_variant!r}; expected one of {BLOCK_VARIANTS}")
        if self.block_variant != "fold_unfold" and k != 2:
            raise ConfigError("deconvolution variants require fold_scale 2")
        if self.stage_resolutions[0] % (k * k):
            raise ConfigError(f"stage 0 resolution {self.stage_resolutions[0]} not divisible by k^2={k * k}")
        for i in range(1, n):
            prev, cur = self.stage_resolutions[i - 1], self.stage_resolutions[i]
            if cur not in (prev * k, prev * k * k):
                raise ConfigError(
                    f"stage {i} resolution {cur} must be k or k^2 times stage {i - 1} resolution {prev}"
                )
        for i, c in enumerate(self.block_channels):
            if c % (k * k):
                raise ConfigError(f"stage {i} block width {c} not divisible by k^2={k * k}")
        if self.stage_resolutions[0] < 2:
            raise ConfigError("stage resolutions must be >= 2")
        if self.mapping_depth < 1 or self.latent_dim < 1 or self.fold_width < 1:
            raise ConfigError("mapping_depth, latent_dim and fold_width must be positive")
        return self

    def scaled_to(self, resolution: int) -> "GeneratorConfig":
        """Copy with every stage resolution rescaled so the final one is ``resolution``."""
        final = self.final_resolution
        if resolution % final and final % resolution:
            raise ConfigError(f"cannot rescale final resolution {final} to {resolution}")
        cfg = copy.deepcopy(self)
        cfg.stage_resolutions = [r * resolution // final for r in self.stage_resolutions]
        return cfg.validate()

    def single_stage(self) -> "GeneratorConfig":
        """The stage-0 generator on its own (shares parameter names with the full model)."""
        cfg = copy.deepcopy(self)
        cfg.stage_resolutions = cfg.stage_resolutions[:1]
        cfg.init_dims = cfg.init_dims[:1]
        cfg.block_channels = cfg.block_channels[:1]
        return cfg.validate()


@dataclass
class DiscriminatorConfig:
    input_resolution: int = 256
    base_channels: int = 32
    max_channels: int = 512
    mbstd_group: int = 4

    def validate(self) -> "DiscriminatorConfig":
        r = self.input_resolution
        if r < 8 or r & (r - 1):
            raise ConfigError(f"discriminator resolution must be a power of two >= 8, got {r}")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ConfigError("need 1 <= base_channels <= max_channels")
        if self.mbstd_group < 1:
            raise ConfigError("mbstd_group must be >= 1")
        return self

    def channels_at(self, res: int) -> int:
        return min(self.base_channels * self.input_resolution // res, self.max_channels)


@dataclass
class TrainConfig:
    lr: float = 2e-3
    beta0: float = 0.0
    beta1: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 16
    r1_gamma: float = 1.0
    r1_every: int = 16
    steps: int = 2000
    seed: int = 0
    ckpt_every: int = 500
    sample_every: int = 0
    log_every: int = 1
    ema: bool = False
    ema_beta: float = 0.999
    precision: str = "float32"

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0.0 <= self.beta0 < 1.0 and 0.0 <= self.beta1 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.r1_every < 1:
            raise ConfigError("batch_size >= 1, steps >= 0 and r1_every >= 1 required")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        return self

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class DatasetConfig:
    source: str = "synthetic_blobs"
    resolution: int = 32
    count: int = 2048
    seed: int = 0
    path: str | None = None

    def validate(self) -> "DatasetConfig":
        if self.source not in ("png_folder", "synthetic_blobs", "synthetic_textures"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "png_folder" and not self.path:
            raise ConfigError("png_folder datasets need a path")
        if self.count < 1 or self.resolution < 2:
            raise ConfigError("dataset count >= 1 and resolution >= 2 required")
        return self


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    output_dir: str = "runs/default"
    proxy_fid_samples: int = 256

    def validate(self) -> "RunConfig":
        self.generator.validate()
        self.discriminator.validate()
        self.train.validate()
        self.dataset.validate()
        g, d, ds = self.generator.final_resolution, self.discriminator.input_resolution, self.dataset.resolution
        if not g == d == ds:
            raise ConfigError(
                f"generator output ({g}), discriminator input ({d}) and dataset ({ds}) resolutions differ"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data or {}, "")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def reference_config() -> GeneratorConfig:
    """Three stages at 16/64/256 with 512/512/128 initial widths."""
    return GeneratorConfig().validate()


def toy_config(variant: str = "fold_unfold", multistage_connection: bool = True) -> RunConfig:
    """Desk-scale run: stages 8/16/32, trunk width 128, synthetic blobs."""
    gen = GeneratorConfig(
        stage_resolutions=[8, 16, 32],
        init_dims=[128, 128, 32],
        block_channels=[128, 128, 32],
        fold_width=8,
        block_variant=variant,
        latent_dim=128,
        mapping_depth=2,
        multistage_connection=multistage_connection,
    )
    disc = DiscriminatorConfig(input_resolution=32, base_channels=16, max_channels=128)
    train = TrainConfig(batch_size=16, steps=2000, r1_gamma=1.0, r1_every=16, ckpt_every=500)
    data = DatasetConfig(source="synthetic_blobs", resolution=32, count=2048, seed=0)
    return RunConfig(gen, disc, train, data, output_dir="runs/toy").validate()


def _set_path(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a YAML run config and apply dotted-key overrides (``train.steps=10``)."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        _set_path(data, key, value)
    try:
        cfg = RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def config_digest(cfg) -> str:
    """sha256 over canonical JSON of a (nested) dataclass config."""
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def sub_rng(seed: int, consumer: str) -> np.random.Generator:
    """Independent generator per named consumer; new names never perturb old streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(consumer.encode())]))
