import numpy as np
import pytest

from pixfold.config import BLOCK_VARIANTS, GeneratorConfig, reference_config
from pixfold.costmodel import (
    REFERENCE_GMACS,
    REFERENCE_PARAMS_M,
    compare_variants,
    cost_report,
    instrumented_count,
    reference_breakdown,
    shape_trace,
    variant_configs,
)
from pixfold.generator import Generator
from pixfold.modconv import ModConv


def small_configs():
    out = []
    for variant in BLOCK_VARIANTS:
        for res, conn in (([4, 8, 16], True), ([4, 16, 32], False)):
            out.append(GeneratorConfig(
                stage_resolutions=res, init_dims=[8, 8, 4], block_channels=[8, 8, 4], fold_width=2,
                block_variant=variant, latent_dim=8, mapping_depth=2, multistage_connection=conn,
            ).validate())
    return out


@pytest.mark.parametrize("cfg", small_configs(), ids=lambda c: f"{c.block_variant}-{c.stage_resolutions[1]}")
def test_analytic_equals_instrumented(cfg):
    g = Generator(cfg, seed=0)
    rep = cost_report(cfg)
    assert rep.total_params == g.num_params()
    z = np.zeros((1, cfg.latent_dim))
    assert instrumented_count(g, z) == rep.total_macs
    assert instrumented_count(g, np.zeros((2, cfg.latent_dim))) == 2 * rep.total_macs


def test_instrumented_count_of_layerless_model():
    assert instrumented_count(lambda x: x, np.zeros((1, 4))) == 0


def test_single_modconv_cost():
    layer = ModConv(512, 512, 3, 512, np.random.default_rng(0))
    assert layer.num_params() == 2_622_464
    # 4x4 output, affine style 512*512 on top of the conv MACs
    n = instrumented_count(lambda x: layer(x, np.zeros((1, 512))), np.zeros((1, 4, 4, 512)))
    assert n == 37_748_736 + 512 * 512


def test_fold_rows_cost_nothing():
    rep = cost_report(reference_config())
    for row in rep.rows:
        if "fold" in row.name.lower() or "Unfolding" in row.name:
            assert row.params == 0 and row.macs == 0


def test_reference_totals_and_ordering():
    ref = cost_report(reference_config())
    assert abs(ref.total_params / 1e6 / REFERENCE_PARAMS_M - 1) <= 0.20
    assert abs(ref.gmacs / REFERENCE_GMACS - 1) <= 0.50
    rows = compare_variants(variant_configs(reference_config(), BLOCK_VARIANTS))
    by = {r.variant: r for r in rows}
    assert by["fold_unfold"].base
    assert by["fold_unfold"].params < by["downsample_deconv"].params < by["fold_deconv"].params
    assert by["fold_unfold"].macs < by["downsample_deconv"].macs
    assert by["fold_unfold"].macs < by["fold_deconv"].macs
    assert by["fold_deconv_sc"].params < by["fold_deconv"].params
    assert by["downsample_deconv_sc"].params < by["downsample_deconv"].params
    text = reference_breakdown(ref)
    assert "deviation" in text and "residual" in text


def test_compare_variants_needs_two_and_identical_rows_match():
    cfg = reference_config()
    with pytest.raises(ValueError):
        compare_variants([cfg])
    a, b = compare_variants([cfg, cfg])
    assert (a.params, a.macs) == (b.params, b.macs)


def test_resolution_rescaling_scales_spatial_macs():
    cfg = reference_config()
    half, full = cost_report(cfg, 128), cost_report(cfg)
    # only the per-position coordinate table depends on resolution
    table = full.rows[[r.name for r in full.rows].index("stage0.coord_embed")].params
    assert full.total_params - half.total_params == table - table // 4
    assert cost_report(cfg, 128).total_macs < cost_report(cfg).total_macs


def test_trace_fold_rows_have_no_kernel():
    for row in shape_trace(reference_config()).rows:
        if row.name.startswith(("Folding", "Unfolding")):
            assert row.kernel is None
