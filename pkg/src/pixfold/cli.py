"""Command-line entry point: ``pixfold {train,generate,interpolate,mix,trace,cost,gradcheck}``.

Run outputs go to ``<out>/{ckpt,samples,logs,reports}``.  When ``--out`` is
not given the run directory is taken from the config's ``output_dir``, placed
under ``$PIXFOLD_OUTPUT_ROOT`` if that variable is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .config import (
    BLOCK_VARIANTS,
    ConfigError,
    RunConfig,
    config_digest,
    load_run_config,
    reference_config,
    sub_rng,
    toy_config,
)
from .costmodel import (
    cost_report,
    instrumented_count,
    reference_breakdown,
    render_variants,
    shape_trace,
    compare_variants,
    variant_configs,
)
from .data import make_grid, save_png
from .generator import Generator
from .tensor import default_dtype, no_grad

OUTPUT_ROOT_ENV = "PIXFOLD_OUTPUT_ROOT"

log = logging.getLogger("pixfold")


class CommandError(RuntimeError):
    """A user-facing failure with an exit code."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# -- helpers ----------------------------------------------------------------------


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def _run_config(args) -> RunConfig:
    overrides = dict(getattr(args, "set", None) or [])
    if getattr(args, "steps", None) is not None:
        overrides["train.steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        overrides["generator.block_variant"] = args.variant
    if getattr(args, "no_multistage_connection", False):
        overrides["generator.multistage_connection"] = False
    if args.config is None:
        base = toy_config().to_dict()
        for key, value in overrides.items():
            node = base
            *path, leaf = key.split(".")
            for part in path:
                node = node.setdefault(part, {})
            node[leaf] = value
        try:
            return RunConfig.from_dict(base).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    return load_run_config(args.config, overrides)


def _generator_config(path: str | None):
    if path is None:
        return reference_config()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    if "generator" in data or "train" in data:
        return load_run_config(path).generator
    return RunConfig.from_dict({"generator": data}).generator.validate()


def _out_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / Path(cfg.output_dir).name
    return Path(cfg.output_dir)


def _latent(seed: int, dim: int, dtype) -> np.ndarray:
    return sub_rng(seed, "cli.latent").standard_normal(dim).astype(dtype)


def _load(ckpt: str):
    from .training import CheckpointError, load_generator

    try:
        return load_generator(ckpt)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CommandError(f"cannot load checkpoint {ckpt}: {exc}", 2) from exc


def _sample_dir(args, ckpt: str) -> Path:
    if args.out:
        return Path(args.out)
    # <run>/ckpt/step_x.ckpt -> <run>/samples
    return Path(ckpt).resolve().parent.parent / "samples"


# -- commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    from .training import Trainer, TrainingAborted

    cfg = _run_config(args)
    out = _out_dir(args, cfg)
    logging.getLogger("pixfold.training").setLevel(logging.INFO)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, out_dir=out)
        if (args.config or args.set) and trainer.digest != config_digest(cfg):
            log.warning("resuming with the checkpoint's embedded config; command-line config ignored")
    else:
        trainer = Trainer(cfg, out_dir=out)
    (out / "reports" / "config.yaml").write_text(yaml.safe_dump(trainer.cfg.to_dict(), sort_keys=False))
    report: dict = {}
    if not args.no_eval:
        report["initial_proxy_fid"] = trainer.proxy_fid()
        print(f"proxy-FID at step {trainer.step}: {report['initial_proxy_fid']:.4f}")
    t0 = time.perf_counter()
    try:
        trainer.run(steps=args.steps, progress_every=args.progress_every)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    elapsed = time.perf_counter() - t0
    trainer.write_samples("final")
    if not args.no_eval:
        report["final_proxy_fid"] = trainer.proxy_fid()
        print(f"proxy-FID at step {trainer.step}: {report['final_proxy_fid']:.4f}")
    report["steps"] = trainer.step
    report["seconds"] = round(elapsed, 2)
    (out / "reports" / "train_summary.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"run directory: {out}")
    return 0


def cmd_generate(args) -> int:
    gen, cfg = _load(args.ckpt)
    out = _sample_dir(args, args.ckpt)
    rng = sub_rng(args.seed, "cli.generate")
    z = rng.standard_normal((args.count, cfg.generator.latent_dim)).astype(cfg.train.dtype)
    with default_dtype(cfg.train.dtype), no_grad():
        for i in range(args.count):
            image, _, partial = gen.generate_with_stage_outputs(z[i : i + 1])
            save_png(out / f"seed{args.seed}_{i:04d}.png", image.data[0])
            if args.stages:
                for s, img in enumerate(partial):
                    save_png(out / f"seed{args.seed}_{i:04d}_stage{s}.png", img.data[0])
    n_files = args.count * (1 + (cfg.generator.num_stages if args.stages else 0))
    print(f"wrote {n_files} PNG files to {out}")
    return 0


def cmd_interpolate(args) -> int:
    if args.n < 2:
        raise CommandError("--n must be at least 2", 2)
    gen, cfg = _load(args.ckpt)
    dt, dim = cfg.train.dtype, cfg.generator.latent_dim
    z1, z2 = _latent(args.seed1, dim, dt), _latent(args.seed2, dim, dt)
    alphas = np.linspace(0.0, 1.0, args.n)
    with default_dtype(dt), no_grad():
        images = gen.interpolate(z1, z2, alphas).data
    out = _sample_dir(args, args.ckpt) / f"interp_{args.seed1}_{args.seed2}_n{args.n}.png"
    save_png(out, make_grid(images, ncol=args.n))
    print(f"wrote {out}")
    return 0


def cmd_mix(args) -> int:
    gen, cfg = _load(args.ckpt)
    try:
        stages = [int(s) for s in args.stages.split(",") if s.strip()] if args.stages else []
    except ValueError as exc:
        raise CommandError(f"--stages must be comma-separated integers: {exc}", 2) from exc
    dt, dim = cfg.train.dtype, cfg.generator.latent_dim
    z1, z2 = _latent(args.seed1, dim, dt), _latent(args.seed2, dim, dt)
    try:
        with default_dtype(dt), no_grad():
            a, b = gen(z1).data[0], gen(z2).data[0]
            mixed = gen.style_mix(z1, z2, stages).data[0]
    except ValueError as exc:
        raise CommandError(str(exc), 2) from exc
    tag = "-".join(map(str, stages)) or "none"
    out = _sample_dir(args, args.ckpt) / f"mix_{args.seed1}_{args.seed2}_stages{tag}.png"
    save_png(out, make_grid(np.stack([a, b, mixed]), ncol=3))
    print(f"wrote {out}")
    return 0


def cmd_trace(args) -> int:
    cfg = _generator_config(args.config)
    trace = shape_trace(cfg)
    print(trace.render(args.stage))
    if args.json:
        rows = trace.to_json() if args.stage is None else [r for r in trace.to_json() if r["stage"] == args.stage]
        Path(args.json).write_text(json.dumps(rows, indent=1, ensure_ascii=False))
    return 0


def cmd_cost(args) -> int:
    cfg = _generator_config(args.config)
    report = cost_report(cfg, args.resolution)
    print(report.render())
    print()
    print(reference_breakdown(report))
    structured: dict = {"report": report.to_json()}
    if args.variants:
        rows = compare_variants(variant_configs(cfg, BLOCK_VARIANTS), resolution=args.resolution)
        print()
        print(render_variants(rows))
        structured["variants"] = [r.__dict__ for r in rows]
    status = 0
    if args.verify:
        targets = variant_configs(cfg, BLOCK_VARIANTS) if args.variants else [cfg]
        checks = []
        for c in targets:
            c = c if args.resolution is None else c.scaled_to(args.resolution)
            gen = Generator(c, seed=0)
            z = np.random.default_rng(0).standard_normal((1, c.latent_dim))
            measured = instrumented_count(gen, z)
            analytic = cost_report(c).total_macs
            ok = measured == analytic
            status = status or (0 if ok else 4)
            checks.append({"variant": c.block_variant, "analytic": analytic, "measured": measured, "match": ok})
            print(f"verify {c.block_variant:22s} analytic {analytic:,}  measured {measured:,}  "
                  f"{'match' if ok else 'MISMATCH'}")
        structured["verify"] = checks
    if args.benchmark:
        gen = Generator(cfg, seed=0).astype(np.float32)
        z = np.random.default_rng(0).standard_normal((1, cfg.latent_dim)).astype(np.float32)
        with default_dtype(np.float32), no_grad():
            gen(z)
            t0 = time.perf_counter()
            for _ in range(args.benchmark):
                gen(z)
        rate = args.benchmark / (time.perf_counter() - t0)
        print(f"speed: {rate:.2f} im/s (batch 1, float32, this machine)")
        structured["images_per_second"] = rate
    if args.json:
        Path(args.json).write_text(json.dumps(structured, indent=1, ensure_ascii=False))
    return status


def cmd_gradcheck(args) -> int:
    from .costmodel import format_table
    from .gradcheck import SCOPES, run_all, run_scope

    checks = run_all(args.seed) if args.scope == "all" else run_scope(args.scope, args.seed)
    rows = [(c.scope, c.name, f"{c.error:.2e}", f"{c.tol:.0e}", "pass" if c.passed else "FAIL") for c in checks]
    print(format_table(("scope", "check", "rel. error", "tol", "result"), rows))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .gradcheck import SCOPES

    p = argparse.ArgumentParser(prog="pixfold", description=__doc__.split("\n")[0], allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train G and D on the configured dataset", allow_abbrev=False)
    t.add_argument("--config", help="YAML run config (default: the built-in toy config)")
    t.add_argument("--steps", type=int, help="total training steps (overrides train.steps)")
    t.add_argument("--seed", type=int, help="run seed (overrides train.seed)")
    t.add_argument("--variant", choices=BLOCK_VARIANTS, help="generation-block variant")
    t.add_argument("--no-multistage-connection", action="store_true",
                   help="do not add the previous stage's features into each stage")
    t.add_argument("--set", action="append", type=_parse_override, metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.batch_size=8 (repeatable)")
    t.add_argument("--out", help=f"run directory (default: config output_dir, under ${OUTPUT_ROOT_ENV} if set)")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    t.add_argument("--no-eval", action="store_true", help="skip proxy-FID at start and end")
    t.add_argument("--progress-every", type=int, default=50, help="progress log interval in steps (0: off)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="write samples from a checkpoint", allow_abbrev=False)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--stages", action="store_true", help="also write each stage's cumulative RGB image")
    g.add_argument("--out", help="output directory (default: <run>/samples)")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("interpolate", help="latent interpolation strip a*z1 + (1-a)*z2", allow_abbrev=False)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--seed1", type=int, required=True)
    i.add_argument("--seed2", type=int, required=True)
    i.add_argument("--n", type=int, default=8, help="number of evenly spaced a values in [0, 1]")
    i.add_argument("--out")
    i.set_defaults(func=cmd_interpolate)

    m = sub.add_parser("mix", help="stage-wise style mixing", allow_abbrev=False)
    m.add_argument("--ckpt", required=True)
    m.add_argument("--seed1", type=int, required=True)
    m.add_argument("--seed2", type=int, required=True)
    m.add_argument("--stages", default="", help="comma-separated stages that take seed2's style (may be empty)")
    m.add_argument("--out")
    m.set_defaults(func=cmd_mix)

    tr = sub.add_parser("trace", help="per-layer output shapes", allow_abbrev=False)
    tr.add_argument("--config", help="generator or run YAML (default: reference config)")
    tr.add_argument("--stage", type=int, help="only this stage")
    tr.add_argument("--json", help="also write the trace as JSON")
    tr.set_defaults(func=cmd_trace)

    c = sub.add_parser("cost", help="parameter and MAC accounting", allow_abbrev=False)
    c.add_argument("--config", help="generator or run YAML (default: reference config)")
    c.add_argument("--resolution", type=int, help="rescale stages so the output has this size")
    c.add_argument("--variants", action="store_true", help="compare all five block variants")
    c.add_argument("--verify", action="store_true", help="cross-check analytic MACs against an instrumented run")
    c.add_argument("--benchmark", type=int, default=0, metavar="N", help="time N batch-1 forward passes")
    c.add_argument("--json", help="write the structured report here")
    c.set_defaults(func=cmd_cost)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites", allow_abbrev=False)
    gc.add_argument("--scope", default="all", choices=["all", *SCOPES])
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
