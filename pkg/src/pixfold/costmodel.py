"""Analytic parameter / MAC accounting and shape traces for generator configs.

Conventions: one multiply-accumulate is one MAC; biases, activations,
fold/unfold, resampling and (de)modulation arithmetic cost nothing.  A k x k
conv producing H'xW' positions costs H'W'k^2 Cin Cout.  A stride-2 transposed
conv costs H W k^2 Cin Cout over its *input* positions (each input pixel
scatters one k x k x Cout patch).  Linear layers cost positions x Cin x Cout,
including the per-sample style affines and the mapping network.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .config import GeneratorConfig
from .generator import TraceRow, block_input_width, block_plan, folded_width, stage_plan
from .ops import mac_counter
from .tensor import Tensor, no_grad

__all__ = [
    "REFERENCE_PARAMS_M",
    "REFERENCE_GMACS",
    "ShapeTrace",
    "CostRow",
    "CostReport",
    "shape_trace",
    "cost_report",
    "count_params",
    "count_macs",
    "instrumented_count",
    "compare_variants",
    "format_table",
]

# headline efficiency figures for the reference 256x256 model
REFERENCE_PARAMS_M = 20.84
REFERENCE_GMACS = 23.78


@dataclass
class ShapeTrace:
    rows: list[TraceRow]

    def stage(self, index: int) -> list[TraceRow]:
        return [r for r in self.rows if r.stage == index]

    def render(self, stage: int | None = None) -> str:
        rows = self.rows if stage is None else self.stage(stage)
        return "\n".join(r.render() for r in rows)

    def to_json(self) -> list[dict]:
        return [
            {"stage": r.stage, "layer": r.name, "shape": list(r.shape),
             "kernel": None if r.kernel is None else list(r.kernel)}
            for r in self.rows
        ]

    def check(self) -> None:
        """Kernel rows must consume the previous row's channels; fold rows preserve element count."""
        prev = None
        for row in self.rows:
            if prev is not None and prev.stage == row.stage:
                if row.kernel is not None and row.name != "ToRGB" and row.kernel[2] != prev.shape[2]:
                    raise ValueError(f"stage {row.stage} {row.name}: kernel Cin {row.kernel[2]} != {prev.shape[2]}")
                if row.kernel is None and row.name.startswith(("Folding×", "Unfolding")):
                    if int(np.prod(row.shape)) != int(np.prod(prev.shape)):
                        raise ValueError(f"stage {row.stage} {row.name}: element count changed")
            prev = row


def shape_trace(cfg: GeneratorConfig) -> ShapeTrace:
    """Per-layer output shapes for every stage, computed from the config alone."""
    cfg.validate()
    rows: list[TraceRow] = []
    for i in range(cfg.num_stages):
        rows.extend(stage_plan(cfg, i))
    trace = ShapeTrace(rows)
    trace.check()
    return trace


@dataclass
class CostRow:
    name: str
    group: str
    params: int
    macs: int


@dataclass
class CostReport:
    """Per-layer parameter and per-sample MAC counts at ``resolution``."""

    variant: str
    resolution: int
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def by_group(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for r in self.rows:
            p, m = out.get(r.group, (0, 0))
            out[r.group] = (p + r.params, m + r.macs)
        return out

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "resolution": self.resolution,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "layers": [asdict(r) for r in self.rows],
        }

    def render(self) -> str:
        body = [(r.name, r.group, f"{r.params:,}", f"{r.macs:,}") for r in self.rows]
        body.append(("total", "", f"{self.total_params:,}", f"{self.total_macs:,}"))
        return format_table(("layer", "group", "params", "MACs"), body)


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-align text columns, right-align numeric-looking ones."""
    cols = list(zip(header, *rows))
    widths = [max(len(str(c)) for c in col) for col in cols]

    def numeric(s: str) -> bool:
        return s.replace(",", "").replace(".", "").replace("-", "").replace("%", "").replace("+", "").isdigit()

    def line(cells):
        return "  ".join(str(c).rjust(w) if numeric(str(c)) else str(c).ljust(w) for c, w in zip(cells, widths))

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in rows])


def _linear(name, group, cin, cout, positions, bias=True) -> CostRow:
    return CostRow(name, group, cin * cout + (cout if bias else 0), positions * cin * cout)


def _modconv(name, group, cin, cout, k, style_dim, macs_positions) -> CostRow:
    params = k * k * cin * cout + cout + style_dim * cin + cin
    return CostRow(name, group, params, macs_positions * k * k * cin * cout + style_dim * cin)


def cost_report(cfg: GeneratorConfig, resolution: int | None = None) -> CostReport:
    """Itemized params and per-sample MACs; ``resolution`` rescales every stage."""
    cfg.validate()
    if resolution is not None and resolution != cfg.final_resolution:
        cfg = cfg.scaled_to(resolution)
    report = CostReport(cfg.block_variant, cfg.final_resolution)
    rows = report.rows
    lat = cfg.latent_dim
    for i in range(cfg.mapping_depth):
        rows.append(_linear(f"mapping.{i}", "mapping", lat, lat, 1))
    k2 = cfg.fold_scale ** 2
    for s in range(cfg.num_stages):
        res, d = cfg.stage_resolutions[s], cfg.init_dims[s]
        pos = res * res
        table = s == 0 and cfg.coord_embedding
        p = f"stage{s}."
        rows.append(CostRow(p + "fourier", "init", 2 * d, pos * 2 * d))
        if table:
            rows.append(CostRow(p + "coord_embed", "init", pos * d, 0))
        rows.append(_linear(p + "init_proj", "init", 2 * d if table else d, d, pos))
        if cfg.uses_fold:
            rows.append(_linear(p + "reduce", "fold", d, cfg.fold_width, pos))
            rows.append(CostRow(p + "fold×2", "fold", 0, 0))
        else:
            rows.append(CostRow(p + "downsample×2", "fold", 0, 0))
        if s > 0:
            r0 = res // k2
            if cfg.prev_fold_count(s):
                rows.append(CostRow(p + "fold(prev)", "fold", 0, 0))
            rows.append(_linear(p + "combine", "combine", folded_width(cfg, s), block_input_width(cfg, s), r0 * r0))
        for spec in block_plan(cfg, s):
            if spec.kind == "unfold":
                rows.append(CostRow(p + spec.name, "block", 0, 0))
                continue
            at = spec.in_res if spec.kind == "deconv" else spec.out_res
            rows.append(_modconv(p + spec.name, "block", spec.cin, spec.cout, spec.k, lat, at * at))
        rows.append(_modconv(p + "to_rgb", "to_rgb", cfg.block_channels[s], 3, 1, lat, pos))
    return report


def count_params(cfg: GeneratorConfig) -> CostReport:
    """Parameter side of the cost report (independent of resolution)."""
    return cost_report(cfg)


def count_macs(cfg: GeneratorConfig, resolution: int | None = None) -> CostReport:
    return cost_report(cfg, resolution)


def instrumented_count(model, inputs) -> int:
    """Multiplies actually executed inside conv/linear kernels during one forward pass."""
    if not isinstance(inputs, Tensor):
        inputs = np.asarray(inputs)
    with no_grad(), mac_counter() as counter:
        model(inputs)
    return counter.total


@dataclass
class VariantRow:
    label: str
    variant: str
    params: int
    macs: int
    base: bool


def compare_variants(cfgs: Sequence[GeneratorConfig], labels: Sequence[str] | None = None,
                     resolution: int | None = None) -> list[VariantRow]:
    """Params / MACs per config; the fold_unfold row (else the first) is flagged as base."""
    if len(cfgs) < 2:
        raise ValueError("compare_variants needs at least two configs")
    labels = list(labels) if labels is not None else [c.block_variant for c in cfgs]
    base_idx = next((i for i, c in enumerate(cfgs) if c.block_variant == "fold_unfold"), 0)
    out = []
    for i, (cfg, label) in enumerate(zip(cfgs, labels)):
        rep = cost_report(cfg, resolution)
        out.append(VariantRow(label, cfg.block_variant, rep.total_params, rep.total_macs, i == base_idx))
    return out


def render_variants(rows: Sequence[VariantRow]) -> str:
    base = next(r for r in rows if r.base)
    body = []
    for r in rows:
        body.append((
            r.label + (" *" if r.base else ""),
            f"{r.params / 1e6:.2f}",
            f"{r.macs / 1e9:.2f}",
            f"{100 * (r.params / base.params - 1):+.1f}%",
            f"{100 * (r.macs / base.macs - 1):+.1f}%",
        ))
    return format_table(("variant", "params (M)", "GMACs", "Δparams", "ΔMACs"), body) + "\n* base"


def variant_configs(cfg: GeneratorConfig, variants: Sequence[str]) -> list[GeneratorConfig]:
    out = []
    for v in variants:
        c = copy.deepcopy(cfg)
        c.block_variant = v
        out.append(c.validate())
    return out


def reference_breakdown(report: CostReport) -> str:
    """Grouped totals next to the headline reference figures, with the residual spelled out."""
    groups = report.by_group()
    body = [(g, f"{p / 1e6:.3f}", f"{m / 1e9:.3f}") for g, (p, m) in groups.items()]
    body.append(("total", f"{report.total_params / 1e6:.3f}", f"{report.gmacs:.3f}"))
    body.append(("reference", f"{REFERENCE_PARAMS_M:.3f}", f"{REFERENCE_GMACS:.3f}"))
    dp = report.total_params / 1e6 / REFERENCE_PARAMS_M - 1
    dm = report.gmacs / REFERENCE_GMACS - 1
    body.append(("deviation", f"{100 * dp:+.1f}%", f"{100 * dm:+.1f}%"))
    note = (
        "Mapping depth, initialization projection widths and the combine projection are\n"
        "not pinned down by the architecture description; they are the likely source of\n"
        "the residual. Groups can be summed selectively to test other accounting choices."
    )
    return format_table(("group", "params (M)", "GMACs"), body) + "\n" + note


def report_json(report: CostReport) -> str:
    return json.dumps(report.to_json(), indent=1)
