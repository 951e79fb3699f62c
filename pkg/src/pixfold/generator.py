"""Multi-stage pixel-synthesis generator with pixel folding.

Each stage initializes a coordinate-based pixel tensor, projects it to a narrow
width, folds it twice, merges it with the previous stage's recovered features,
then runs a four-conv generation block (two unfolds restore the stage
resolution) and predicts RGB.  Per-stage RGB maps are upsampled to the final
resolution and summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import GeneratorConfig, sub_rng
from .coords import PixelInit, PixelTensor, reduce_before_fold
from .folding import fold, unfold
from .modconv import ModConv, ToRGB
from .nn import EqualLinear, MappingNetwork, Module
from .ops import avg_downsample2x, upsample_nearest
from .tensor import ShapeError, Tensor, as_tensor, no_grad

__all__ = [
    "LayerSpec",
    "TraceRow",
    "StageOutput",
    "block_plan",
    "stage_plan",
    "Stage",
    "Generator",
    "combine_stage",
    "aggregate_rgb",
]


@dataclass(frozen=True)
class LayerSpec:
    """One step of a generation block.

    kind is ``conv`` (ModConv), ``deconv`` (stride-2 modulated transposed conv)
    or ``unfold``; resolutions are square side lengths.
    """

    name: str
    kind: str
    cin: int
    cout: int
    in_res: int
    out_res: int
    k: int = 3


@dataclass(frozen=True)
class TraceRow:
    stage: int
    name: str
    shape: tuple[int, int, int]
    kernel: tuple[int, int, int, int] | None = None

    def render(self) -> str:
        shape = "×".join(str(s) for s in self.shape)
        kernel = "—" if self.kernel is None else "(" + "×".join(str(s) for s in self.kernel) + ")"
        return f"{self.name}\t{shape}\t{kernel}"


@dataclass
class StageOutput:
    features: PixelTensor
    rgb: Tensor


def folded_width(cfg: GeneratorConfig, stage: int) -> int:
    k2 = cfg.fold_scale ** 2
    return cfg.fold_width * k2 * k2 if cfg.uses_fold else cfg.init_dims[stage]


def block_input_width(cfg: GeneratorConfig, stage: int) -> int:
    if stage == 0:
        return folded_width(cfg, stage)
    k2 = cfg.fold_scale ** 2
    return cfg.block_channels[stage - 1] * k2 ** cfg.prev_fold_count(stage)


def block_plan(cfg: GeneratorConfig, stage: int) -> list[LayerSpec]:
    """Layer sequence of a stage's generation block for the configured variant."""
    k = cfg.fold_scale
    res = cfg.stage_resolutions[stage]
    r0, r1 = res // (k * k), res // k
    t = cfg.block_channels[stage]
    q = t // (k * k)
    cin = block_input_width(cfg, stage)
    v = cfg.block_variant
    if v == "fold_unfold":
        return [
            LayerSpec("ModConv0", "conv", cin, t, r0, r0),
            LayerSpec("Unfolding0", "unfold", t, q, r0, r1, 0),
            LayerSpec("ModConv1", "conv", q, t, r1, r1),
            LayerSpec("ModConv2", "conv", t, t, r1, r1),
            LayerSpec("Unfolding1", "unfold", t, q, r1, res, 0),
            LayerSpec("ModConv3", "conv", q, t, res, res),
        ]
    mid = q if cfg.shape_consistent else t
    return [
        LayerSpec("DeConv0", "deconv", cin, mid, r0, r1),
        LayerSpec("ModConv1", "conv", mid, t, r1, r1),
        LayerSpec("DeConv1", "deconv", t, mid, r1, res),
        LayerSpec("ModConv3", "conv", mid, t, res, res),
    ]


def stage_plan(cfg: GeneratorConfig, stage: int) -> list[TraceRow]:
    """Output shapes of every layer of one stage, without building parameters."""
    k = cfg.fold_scale
    res = cfg.stage_resolutions[stage]
    d = cfg.init_dims[stage]
    r0 = res // (k * k)
    rows = [TraceRow(stage, "Initialization", (res, res, d))]
    if cfg.uses_fold:
        rows.append(TraceRow(stage, "projection", (res, res, cfg.fold_width)))
        rows.append(TraceRow(stage, "Folding×2", (r0, r0, folded_width(cfg, stage))))
    else:
        rows.append(TraceRow(stage, "DownS.", (r0, r0, d)))
    if stage > 0:
        if cfg.prev_fold_count(stage):
            rows.append(TraceRow(stage, "Folding(prev)", (r0, r0, block_input_width(cfg, stage))))
        rows.append(TraceRow(stage, "Combine", (r0, r0, block_input_width(cfg, stage))))
    for spec in block_plan(cfg, stage):
        kernel = None if spec.kind == "unfold" else (spec.k, spec.k, spec.cin, spec.cout)
        rows.append(TraceRow(stage, spec.name, (spec.out_res, spec.out_res, spec.cout), kernel))
    t = cfg.block_channels[stage]
    # RGB heads are listed as (1, 1, 3, Cin), matching the reference shape table in tests/golden
    rows.append(TraceRow(stage, "ToRGB", (res, res, 3), (1, 1, 3, t)))
    return rows


def combine_stage(folded: PixelTensor, prev: PixelTensor | None, proj: EqualLinear | None,
                  connect: bool = True) -> PixelTensor:
    """Project E_i^f to the block width and add E_{i-1}^u (stage 0 passes through)."""
    x = folded.data if proj is None else proj(folded.data)
    if prev is not None and connect:
        if prev.shape[1:3] != x.shape[1:3]:
            raise ShapeError(
                f"combine: folded tensor spatial {x.shape[1:3]} != previous features {prev.shape[1:3]}"
            )
        x = x + prev.data
    return PixelTensor(x, folded.stage, folded.fold_level)


def aggregate_rgb(stage_rgbs: Sequence[Tensor], resolution: int | None = None) -> Tensor:
    """Nearest-upsample every stage's RGB map to the final size and sum in stage order."""
    if not stage_rgbs:
        raise ValueError("aggregate_rgb needs at least one stage output")
    final = resolution or max(r.shape[1] for r in stage_rgbs)
    total = None
    for rgb in stage_rgbs:
        rgb = as_tensor(rgb)
        f = final // rgb.shape[1]
        if f * rgb.shape[1] != final:
            raise ShapeError(f"stage RGB size {rgb.shape[1]} does not divide final size {final}")
        up = rgb if f == 1 else upsample_nearest(rgb, f)
        total = up if total is None else total + up
    return total


class Stage(Module):
    def __init__(self, cfg: GeneratorConfig, index: int, rng: np.random.Generator):
        self.index = index
        self.cfg = cfg
        res, d = cfg.stage_resolutions[index], cfg.init_dims[index]
        self.init = PixelInit(index, res, d, rng, cfg.coord_embedding)
        self.reduce = EqualLinear(d, cfg.fold_width, rng) if cfg.uses_fold else None
        self.combine = (
            EqualLinear(folded_width(cfg, index), block_input_width(cfg, index), rng) if index > 0 else None
        )
        self.plan = block_plan(cfg, index)
        self.convs = [
            ModConv(s.cin, s.cout, s.k, cfg.latent_dim, rng, up=(s.kind == "deconv"))
            for s in self.plan
            if s.kind != "unfold"
        ]
        self.to_rgb = ToRGB(cfg.block_channels[index], cfg.latent_dim, rng)

    def forward(self, w: Tensor, prev: StageOutput | None, trace: list | None = None) -> StageOutput:
        cfg = self.cfg
        n = w.shape[0]

        def note(name, t, kernel=None):
            if trace is not None:
                trace.append(TraceRow(self.index, name, tuple(t.shape[1:]), kernel))

        e = self.init(n)
        note("Initialization", e.data)
        if cfg.uses_fold:
            e = reduce_before_fold(self.reduce, e)
            note("projection", e.data)
            x = fold(fold(e.data, cfg.fold_scale), cfg.fold_scale)
            note("Folding×2", x)
        else:
            x = avg_downsample2x(avg_downsample2x(e.data))
            note("DownS.", x)
        folded = PixelTensor(x, self.index, 2)
        prev_features = prev.features if prev else None
        if prev_features is not None and cfg.prev_fold_count(self.index):
            prev_features = PixelTensor(fold(prev_features.data, cfg.fold_scale), prev_features.stage,
                                        prev_features.fold_level + 1)
            note("Folding(prev)", prev_features.data)
        merged = combine_stage(folded, prev_features, self.combine, cfg.multistage_connection)
        x = merged.data
        if self.index > 0:
            note("Combine", x)
        convs = iter(self.convs)
        for spec in self.plan:
            if spec.kind == "unfold":
                x = unfold(x, cfg.fold_scale)
                note(spec.name, x)
                continue
            layer = next(convs)
            x = layer(x, w)
            note(spec.name, x, layer.kernel_shape)
        rgb = self.to_rgb(x, w)
        note("ToRGB", rgb, (1, 1, 3, self.to_rgb.cin))
        return StageOutput(PixelTensor(x, self.index, 0), rgb)


class Generator(Module):
    """Mapping network plus one :class:`Stage` per configured resolution."""

    def __init__(self, cfg: GeneratorConfig, seed: int = 0, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng or sub_rng(seed, "init.generator")
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.mapping_depth, rng, cfg.mapping_lr_mul)
        self.stages = [Stage(cfg, i, rng) for i in range(cfg.num_stages)]

    @property
    def dtype(self):
        return self.mapping.layers[0].weight.dtype

    def _latent(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        if z.ndim == 1:
            z = z.reshape(1, -1)
        return z

    def map(self, z) -> Tensor:
        return self.mapping(self._latent(z))

    def synthesize(self, ws, trace: list | None = None) -> tuple[Tensor, list[StageOutput]]:
        """Run all stages; ``ws`` is one style batch or a per-stage list of them."""
        if isinstance(ws, Tensor):
            ws = [ws] * self.cfg.num_stages
        if len(ws) != self.cfg.num_stages:
            raise ValueError(f"need {self.cfg.num_stages} per-stage styles, got {len(ws)}")
        outputs: list[StageOutput] = []
        prev = None
        for stage, w in zip(self.stages, ws):
            prev = stage(w, prev, trace)
            outputs.append(prev)
        image = aggregate_rgb([o.rgb for o in outputs], self.cfg.final_resolution)
        return image, outputs

    def forward(self, z) -> Tensor:
        return self.synthesize(self.map(z))[0]

    generate = forward

    def generate_with_stage_outputs(self, z) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        """Image, per-stage RGB maps I'_i, and cumulative upsampled partial sums."""
        image, outputs = self.synthesize(self.map(z))
        rgbs = [o.rgb for o in outputs]
        partial = [aggregate_rgb(rgbs[: i + 1], self.cfg.final_resolution) for i in range(len(rgbs))]
        return image, rgbs, partial

    def interpolate(self, z1, z2, alphas) -> Tensor:
        """Images for z = a*z1 + (1-a)*z2 at each a in ``alphas`` (batched)."""
        z1 = np.asarray(z1, dtype=self.dtype).reshape(-1)
        z2 = np.asarray(z2, dtype=self.dtype).reshape(-1)
        alphas = np.asarray(alphas, dtype=self.dtype).reshape(-1, 1)
        if np.any(alphas < 0) or np.any(alphas > 1):
            raise ValueError("interpolation factors must lie in [0, 1]")
        z = alphas * z1 + (1 - alphas) * z2
        return self.forward(z)

    def style_mix(self, z1, z2, replace_stages) -> Tensor:
        """Stages in ``replace_stages`` take w(z2); the rest take w(z1)."""
        replace = set(replace_stages)
        bad = [s for s in replace if not (isinstance(s, (int, np.integer)) and 0 <= s < self.cfg.num_stages)]
        if bad:
            raise ValueError(f"invalid stage index {bad}; valid range 0..{self.cfg.num_stages - 1}")
        w1, w2 = self.map(z1), self.map(z2)
        ws = [w2 if i in replace else w1 for i in range(self.cfg.num_stages)]
        return self.synthesize(ws)[0]

    def trace(self, batch: int = 1, seed: int = 0) -> list[TraceRow]:
        """Runtime shapes of every layer for one forward pass."""
        rows: list[TraceRow] = []
        z = np.random.default_rng(seed).standard_normal((batch, self.cfg.latent_dim))
        with no_grad():
            self.synthesize(self.map(z), trace=rows)
        return rows
