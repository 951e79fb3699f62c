"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run the file directly (``python tests/test_acceptance.py``) or through pytest.
Criteria 7, 8 and 10 train real toy models and take roughly 40 minutes together.
"""

import contextlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import parse_golden_trace  # noqa: E402
from pixfold import cli  # noqa: E402
from pixfold.config import BLOCK_VARIANTS, GeneratorConfig, reference_config, toy_config  # noqa: E402
from pixfold.costmodel import (  # noqa: E402
    REFERENCE_GMACS,
    REFERENCE_PARAMS_M,
    compare_variants,
    cost_report,
    instrumented_count,
    reference_breakdown,
    variant_configs,
)
from pixfold.folding import fold, fold_array, unfold_array  # noqa: E402
from pixfold.generator import Generator  # noqa: E402
from pixfold.gradcheck import run_all  # noqa: E402
from pixfold.modconv import ModConv  # noqa: E402
from pixfold.tensor import Tensor, default_dtype, grad, no_grad  # noqa: E402

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    """report(number, title, ok, detail) prints the verdict line and asserts it."""

    def _report(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})")
        assert ok, f"criterion {number} failed: {detail}"

    return _report


def call_cli(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(argv)
    return code, buf.getvalue()


def test_01_shape_trace_golden(report):
    t0 = time.perf_counter()
    code, out = call_cli(["trace", "--stage", "0"])
    elapsed = time.perf_counter() - t0
    rows = []
    for line in out.strip().splitlines():
        name, shape, kernel = line.split("\t")
        rows.append((name, tuple(int(v) for v in shape.split("×")),
                     None if kernel == "—" else tuple(int(v) for v in kernel.strip("()").split("×"))))
    golden = parse_golden_trace()["fold_unfold"]
    ok = code == 0 and rows == golden and len(rows) == 10 and elapsed < 1.0
    report(1, "shape trace equals the golden first-stage table", ok,
           f"{sum(a == b for a, b in zip(rows, golden))}/{len(golden)} rows match, {elapsed:.3f}s")


def _cost_configs():
    cfgs = []
    for variant in BLOCK_VARIANTS:
        cfgs.append(GeneratorConfig(stage_resolutions=[4, 8, 16], init_dims=[8, 8, 4], block_channels=[8, 8, 4],
                                    fold_width=2, block_variant=variant, latent_dim=8, mapping_depth=2).validate())
        cfgs.append(GeneratorConfig(stage_resolutions=[4, 16, 32], init_dims=[16, 8, 8], block_channels=[8, 16, 8],
                                    fold_width=3, block_variant=variant, latent_dim=6, mapping_depth=1,
                                    multistage_connection=False, coord_embedding=False).validate())
        cfgs.append(toy_config(variant).generator)
    return cfgs


def test_02_cost_oracle_equivalence(report):
    t0 = time.perf_counter()
    cfgs = _cost_configs()
    mismatches = []
    for cfg in cfgs:
        g = Generator(cfg, seed=0)
        measured = instrumented_count(g, np.zeros((1, cfg.latent_dim)))
        if measured != cost_report(cfg).total_macs or g.num_params() != cost_report(cfg).total_params:
            mismatches.append(cfg.block_variant)
    elapsed = time.perf_counter() - t0
    variants = {c.block_variant for c in cfgs}
    ok = not mismatches and len(cfgs) >= 10 and variants == set(BLOCK_VARIANTS) and elapsed < 60
    report(2, "analytic MACs equal instrumented multiply counts", ok,
           f"{len(cfgs) - len(mismatches)}/{len(cfgs)} configs exact over {len(variants)} variants, {elapsed:.1f}s")


def test_03_efficiency_reproduction(report, capsys):
    ref = cost_report(reference_config())
    dp = ref.total_params / 1e6 / REFERENCE_PARAMS_M - 1
    dm = ref.gmacs / REFERENCE_GMACS - 1
    rows = {r.variant: r for r in compare_variants(variant_configs(reference_config(), BLOCK_VARIANTS))}
    order = rows["fold_unfold"].params < rows["downsample_deconv"].params < rows["fold_deconv"].params
    sc = (rows["fold_deconv_sc"].params < rows["fold_deconv"].params
          and rows["downsample_deconv_sc"].params < rows["downsample_deconv"].params)
    breakdown = reference_breakdown(ref)
    with capsys.disabled():
        print("\n" + breakdown)
    ok = abs(dp) <= 0.20 and abs(dm) <= 0.50 and order and sc and "residual" in breakdown
    report(3, "reference params/GMACs and variant ordering", ok,
           f"{ref.total_params / 1e6:.2f}M ({100 * dp:+.1f}%), {ref.gmacs:.2f} GMACs ({100 * dm:+.1f}%), "
           f"ordering {'ok' if order else 'broken'}, sc cheaper {'yes' if sc else 'no'}")


def test_04_fold_property_suite(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures = 0
    for case in range(200):
        k = (2, 3, 4)[case % 3]
        n, c = rng.integers(1, 4), rng.integers(1, 5)
        h, w = rng.integers(1, 4) * k, rng.integers(1, 4) * k
        x = rng.standard_normal((n, h, w, c))
        f = fold_array(x, k)
        roundtrip = np.array_equal(unfold_array(f, k), x)
        multiset = np.array_equal(np.sort(f, axis=None), np.sort(x, axis=None))
        t = Tensor(x, requires_grad=True)
        g = rng.standard_normal(f.shape)
        (gx,) = grad((fold(t, k) * Tensor(g)).sum(), [t])
        perm_grad = np.array_equal(gx.data, unfold_array(g, k))
        failures += not (roundtrip and multiset and perm_grad)
    elapsed = time.perf_counter() - t0
    report(4, "fold/unfold roundtrip, multiset and gradient properties", failures == 0 and elapsed < 10,
           f"{200 - failures}/200 cases, k in {{2,3,4}}, {elapsed:.2f}s")


def test_05_gradient_suite(report):
    t0 = time.perf_counter()
    checks = run_all(seed=0)
    elapsed = time.perf_counter() - t0
    failed = [f"{c.scope}.{c.name}" for c in checks if not c.passed]
    names = {c.name for c in checks}
    covered = all(any(key in n for n in names) for key in ("modulate", "r1_penalty", "g_loss", "d_loss"))
    scopes = {c.scope for c in checks}
    ok = not failed and covered and {"generator", "discriminator"} <= scopes and elapsed < 300
    worst = max(checks, key=lambda c: c.error / c.tol)
    report(5, "finite-difference gradient suite", ok,
           f"{len(checks) - len(failed)}/{len(checks)} checks, worst {worst.scope}.{worst.name} "
           f"{worst.error:.1e} vs {worst.tol:.0e}, {elapsed:.1f}s" + (f", failed {failed}" if failed else ""))


def test_06_demodulation_scale_invariance(report):
    rng = np.random.default_rng(6)
    worst = 0.0
    for case in range(50):
        cin, cout = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        layer = ModConv(cin, cout, 3, 8, rng, up=bool(case % 5 == 4))
        layer.fused = bool(case % 2)
        x = rng.standard_normal((2, 5, 5, cin))
        # styles around the affine bias init of 1; the demodulation epsilon contributes
        # about eps / (2 * sum(s^2 w^2)) relative error, negligible in this range
        s = rng.uniform(0.5, 2.0, size=(2, cin))
        c = float(10.0 ** rng.uniform(-1, 1))
        with no_grad():
            a = layer(x, None, styles=Tensor(s)).data
            b = layer(x, None, styles=Tensor(c * s)).data
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-30)))
    report(6, "demodulated output invariant to positive style rescaling", worst < 1e-5,
           f"50 cases, worst rel. err {worst:.1e}")


def _train(out, *extra):
    code, _ = call_cli(["train", "--out", str(out), "--progress-every", "0", *extra])
    return code


def test_07_toy_training_convergence(report, tmp_path_factory):
    cfg = toy_config()
    out = tmp_path_factory.mktemp("toy2000")
    t0 = time.perf_counter()
    code = _train(out, "--steps", "2000", "--seed", "0")
    elapsed = time.perf_counter() - t0
    summary = json.loads((out / "reports" / "train_summary.json").read_text()) if code == 0 else {}
    aborts = list((out / "reports").glob("nan_abort_*.json"))
    first, last = summary.get("initial_proxy_fid", float("nan")), summary.get("final_proxy_fid", float("nan"))
    ok = (code == 0 and not aborts and last < 0.5 * first and elapsed < 1800
          and cfg.generator.stage_resolutions == [8, 16, 32] and cfg.generator.block_channels[0] == 128
          and cfg.train.batch_size == 16)
    report(7, "toy blob run halves proxy-FID in 2000 steps", ok,
           f"proxy-FID {first:.3f} -> {last:.3f} (ratio {last / first:.3f}), exit {code}, "
           f"{len(aborts)} aborts, {elapsed / 60:.1f} min")


@pytest.fixture(scope="module")
def determinism_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("det_a"), tmp_path_factory.mktemp("det_b")
    codes = [_train(d, "--steps", "200", "--seed", "7", "--no-eval") for d in (a, b)]
    return codes, a, b


def test_08_determinism(report, determinism_runs):
    codes, a, b = determinism_runs
    logs_equal = (a / "logs" / "metrics.jsonl").read_bytes() == (b / "logs" / "metrics.jsonl").read_bytes()
    ckpts_a = sorted(p.name for p in (a / "ckpt").iterdir())
    ckpts_b = sorted(p.name for p in (b / "ckpt").iterdir())
    ckpt_equal = ckpts_a == ckpts_b and all(
        (a / "ckpt" / n).read_bytes() == (b / "ckpt" / n).read_bytes() for n in ckpts_a)
    lines = len((a / "logs" / "metrics.jsonl").read_text().splitlines())
    ok = codes == [0, 0] and logs_equal and ckpt_equal and lines == 200
    report(8, "identical 200-step runs are bitwise identical", ok,
           f"{lines} log lines {'equal' if logs_equal else 'DIFFER'}, {len(ckpts_a)} checkpoints "
           f"{'equal' if ckpt_equal else 'DIFFER'}")


def test_09_semantic_ops(report):
    cfg = toy_config().generator
    with default_dtype(np.float32):
        g = Generator(cfg, seed=11)
    rng = np.random.default_rng(9)
    z1, z2 = (rng.standard_normal(cfg.latent_dim).astype(np.float32) for _ in range(2))
    with default_dtype(np.float32), no_grad():
        plain1, plain2 = g(z1[None]).data, g(z2[None]).data
        strip = g.interpolate(z1, z2, np.linspace(0, 1, 5)).data
        interp = np.array_equal(strip[-1:], plain1) and np.array_equal(strip[:1], plain2)
        mix = (np.array_equal(g.style_mix(z1[None], z2[None], []).data, plain1)
               and np.array_equal(g.style_mix(z1[None], z2[None], range(cfg.num_stages)).data, plain2))
        image, _, partial = g.generate_with_stage_outputs(z1[None])
        cumulative = np.array_equal(partial[-1].data, image.data) and np.array_equal(image.data, plain1)
    report(9, "interpolation, style-mix and stage-sum contracts bitwise", interp and mix and cumulative,
           f"interpolation {'ok' if interp else 'FAIL'}, mix {'ok' if mix else 'FAIL'}, "
           f"stage sum {'ok' if cumulative else 'FAIL'}")


def test_10_ablation_harness(report, tmp_path_factory, determinism_runs):
    codes, base, _ = determinism_runs
    results = {"fold_unfold": (codes[0], base)}
    for variant in BLOCK_VARIANTS[1:]:
        out = tmp_path_factory.mktemp(variant)
        results[variant] = (_train(out, "--steps", "200", "--variant", variant, "--no-eval"), out)
    out = tmp_path_factory.mktemp("no_msc")
    results["no-multistage-connection"] = (_train(out, "--steps", "200", "--no-multistage-connection",
                                                  "--no-eval"), out)
    done = {}
    for name, (code, out) in results.items():
        log = out / "logs" / "metrics.jsonl"
        steps = len(log.read_text().splitlines()) if log.exists() else 0
        done[name] = code == 0 and steps == 200 and (out / "ckpt" / "step_000200.ckpt").exists()
    report(10, "every block variant and the no-connection ablation train 200 steps", all(done.values()),
           ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in done.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
