"""Finite-difference gradient suites, grouped by module.

Each suite returns :class:`Check` records.  Primitive checks compare every
gradient element against central differences (tolerance 1e-5); end-to-end
checks on tiny models use 1e-4 and combine per-element checks on small
parameter tensors with a random-direction check over all parameters.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .config import DiscriminatorConfig, GeneratorConfig
from .discriminator import Discriminator, ResidualBlock, minibatch_stddev
from .folding import fold, unfold
from .generator import Generator
from .modconv import ModConv, ToRGB, modulate
from .nn import Module
from .tensor import Tensor, concat, default_dtype, enable_grad, finite_diff_check, grad, matmul, sigmoid, softplus

__all__ = ["Check", "SCOPES", "directional_check", "run_scope", "run_all", "PRIMITIVE_TOL", "MODEL_TOL"]

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class Check:
    scope: str
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tol


def directional_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
                      seed: int = 0) -> float:
    """Relative error of the directional derivative along one random direction (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    dirs = [d / norm for d in dirs]  # unit step overall, so eps bounds every coordinate's move
    with default_dtype(np.float64), enable_grad():
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        proj = rng.standard_normal(out.shape)
        grads = grad((out * Tensor(proj)).sum(), leaves)
        analytic = sum(float(np.sum(g.data * d)) for g, d in zip(grads, dirs))

        def value(sign):
            shifted = [Tensor(a + sign * eps * d, requires_grad=True) for a, d in zip(arrays, dirs)]
            return float(np.sum(fn(*shifted).data * proj))

        numeric = (value(1.0) - value(-1.0)) / (2 * eps)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


@contextlib.contextmanager
def _swapped(module: Module, names: Sequence[str], tensors: Sequence[Tensor]):
    """Temporarily replace named parameters with the given tensors."""
    saved = []
    for name, t in zip(names, tensors):
        *path, leaf = name.split(".")
        owner = module
        for part in path:
            owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
        saved.append((owner, leaf, getattr(owner, leaf)))
        setattr(owner, leaf, t)
    try:
        yield
    finally:
        for owner, leaf, old in reversed(saved):
            setattr(owner, leaf, old)


def _param_fn(module: Module, names: Sequence[str], call: Callable[[], Tensor]):
    def fn(*tensors):
        with _swapped(module, names, tensors):
            return call()
    return fn


def _fd(fn, inputs, seed=0, wrt=None, smooth=False) -> float:
    # Kinked functions (leaky-ReLU networks) need a 1e-6 step to stay on one linear piece.
    # Smooth and linear ones use 1e-4: truncation error is then ~1e-8 relative, while
    # float64 cancellation noise in the central difference shrinks by 100x.
    # The 1e-4 floor absorbs roundoff on gradients that are exactly zero.
    return finite_diff_check(fn, inputs, eps=1e-4 if smooth else 1e-6, seed=seed, wrt=wrt, floor=1e-4)


# -- suites ---------------------------------------------------------------------


def _tensor_suite(rng) -> list[tuple[str, float, float]]:
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    row = rng.standard_normal((1, 4))
    m1, m2 = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
    # keep leaky-relu inputs away from the kink so central differences are valid
    lr_in = np.where(np.abs(a) < 0.05, 0.3, a)
    cases = [
        ("add_broadcast", lambda x, y: x + y, [a, row]),
        ("sub", lambda x, y: x - y, [a, b]),
        ("mul_broadcast", lambda x, y: x * y, [a, row]),
        ("div", lambda x, y: x / y, [a, pos]),
        ("pow", lambda x: x ** 3.0, [a]),
        ("sqrt", lambda x: x.sqrt(), [pos]),
        ("exp", lambda x: x.exp(), [a]),
        ("log", lambda x: x.log(), [pos]),
        ("sin_cos", lambda x: x.sin() * x.cos(), [a]),
        ("sigmoid", lambda x: sigmoid(x), [a]),
        ("softplus", lambda x: softplus(x), [a]),
        ("sum_mean", lambda x: x.sum(axis=0) + x.mean(axis=1).sum(), [a]),
        ("reshape_transpose", lambda x: x.reshape(4, 3).transpose() * x, [a]),
        ("broadcast_to", lambda x: x.broadcast_to((3, 4)) * 2.0, [row]),
        ("slice", lambda x: x[1:, ::2] * 3.0, [a]),
        ("concat", lambda x, y: concat([x, y], axis=0), [a, b]),
        ("matmul", lambda x, y: matmul(x, y), [m1, m2]),
        ("leaky_relu", lambda x: ops.leaky_relu(x, 0.2, 1.5), [lr_in]),
        # second order: gradient of a gradient
        ("double_backward_mul_exp", lambda x: grad((x * x.exp()).sum(), [x], create_graph=True)[0], [a]),
    ]
    return [(name, _fd(fn, ins, smooth=True), PRIMITIVE_TOL) for name, fn, ins in cases]


def _ops_suite(rng) -> list[tuple[str, float, float]]:
    x = rng.standard_normal((2, 5, 5, 3))
    x6 = rng.standard_normal((2, 6, 6, 3))
    k3 = rng.standard_normal((3, 3, 3, 4))
    k1 = rng.standard_normal((1, 1, 3, 4))
    kps = rng.standard_normal((2, 3, 3, 3, 4))
    g = rng.standard_normal((2, 3, 3, 4))
    small = rng.standard_normal((2, 3, 3, 4))
    lin_w = rng.standard_normal((3, 4))
    cases = [
        ("conv2d_same", lambda a, w: ops.conv2d(a, w), [x, k3]),
        ("conv2d_stride2", lambda a, w: ops.conv2d(a, w, stride=2, padding=1), [x, k3]),
        ("conv2d_1x1", lambda a, w: ops.conv2d(a, w), [x, k1]),
        ("conv2d_per_sample", lambda a, w: ops.conv2d(a, w), [x, kps]),
        ("conv_transpose2d", lambda a, w: ops.conv_transpose2d(a, w, 2, 1, (5, 5)), [g, k3]),
        ("transposed_conv2d", lambda a, w: ops.transposed_conv2d(a, w, 2), [small, k3]),
        ("conv2d_weight_grad", lambda a, gg: ops.conv2d_weight_grad(a, gg, 3, 2, 1), [x, g]),
        ("conv2d_weight_grad_per_sample", lambda a, gg: ops.conv2d_weight_grad(a, gg, 3, 2, 1, True), [x, g]),
        ("conv2d_double_backward",
         lambda a, w: grad((ops.conv2d(a, w) ** 2.0).sum(), [a], create_graph=True)[0], [x, k3]),
        ("linear", lambda a, w: ops.linear(a, w), [x, lin_w]),
        ("upsample_nearest", lambda a: ops.upsample_nearest(a, 2), [x]),
        ("avg_downsample2x", lambda a: ops.avg_downsample2x(a), [x6]),
    ]
    return [(name, _fd(fn, ins, smooth=True), PRIMITIVE_TOL) for name, fn, ins in cases]


def _folding_suite(rng) -> list[tuple[str, float, float]]:
    out = []
    for k in (2, 3):
        t = rng.standard_normal((2, 2 * k, k, 3))
        u = rng.standard_normal((2, 2, 1, 2 * k * k))
        out.append((f"fold_k{k}", _fd(lambda a: fold(a, k), [t], smooth=True), PRIMITIVE_TOL))
        out.append((f"unfold_k{k}", _fd(lambda a: unfold(a, k), [u], smooth=True), PRIMITIVE_TOL))
        out.append((f"fold_unfold_k{k}", _fd(lambda a: unfold(fold(a, k), k) * a, [t], smooth=True), PRIMITIVE_TOL))
    return out


def _modconv_suite(rng) -> list[tuple[str, float, float]]:
    kern = rng.standard_normal((3, 3, 4, 5))
    s1 = rng.uniform(0.5, 1.5, 4)
    sn = rng.uniform(0.5, 1.5, (2, 4))
    x = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((2, 6))
    out = [
        ("modulate_demod_single", _fd(lambda k, s: modulate(k, s), [kern, s1], smooth=True), PRIMITIVE_TOL),
        ("modulate_demod_batched", _fd(lambda k, s: modulate(k, s), [kern, sn], smooth=True), PRIMITIVE_TOL),
        ("modulate_plain", _fd(lambda k, s: modulate(k, s, demodulate=False), [kern, sn], smooth=True), PRIMITIVE_TOL),
    ]
    with default_dtype(np.float64):
        layer_rng = np.random.default_rng(1)
        for label, layer in (
            ("modconv", ModConv(4, 5, 3, 6, layer_rng, activate=False)),
            ("modconv_fused_path", ModConv(4, 5, 3, 6, layer_rng, activate=False)),
            ("modconv_deconv", ModConv(4, 5, 3, 6, layer_rng, activate=False, up=True)),
            ("to_rgb", ToRGB(4, 6, layer_rng)),
        ):
            layer.fused = label == "modconv_fused_path"
            names = ["weight", "affine.weight", "affine.bias"]

            def call(xx, ww, *params, layer=layer, names=names):
                with _swapped(layer, names, params):
                    return layer(xx, ww)

            inputs = [x, w] + [dict(layer.named_parameters())[n].data for n in names]
            out.append((label, _fd(call, inputs, smooth=True), PRIMITIVE_TOL))
    return out


def tiny_generator_config(variant: str = "fold_unfold") -> GeneratorConfig:
    return GeneratorConfig(
        stage_resolutions=[4, 8], init_dims=[4, 4], block_channels=[8, 8], fold_width=1,
        block_variant=variant, latent_dim=4, mapping_depth=1, mapping_lr_mul=0.5,
    ).validate()


def tiny_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(input_resolution=8, base_channels=2, max_channels=4, mbstd_group=2).validate()


def _model_check(module: Module, call: Callable[[], Tensor], small: Sequence[str], seed: int) -> list[float]:
    """Per-element check on ``small`` params plus a directional check over all params."""
    named = dict(module.named_parameters())
    errs = [_fd(_param_fn(module, small, call), [named[n].data for n in small], seed=seed)]
    everything = list(named)
    errs.append(directional_check(_param_fn(module, everything, call), [named[n].data for n in everything],
                                  seed=seed))
    return errs


def _generator_suite(rng) -> list[tuple[str, float, float]]:
    out = []
    z = rng.standard_normal((2, 4))
    for variant in ("fold_unfold", "fold_deconv", "downsample_deconv_sc"):
        with default_dtype(np.float64):
            gen = Generator(tiny_generator_config(variant), seed=3)
        small = ["stages.1.to_rgb.weight", "stages.1.init.fourier", "mapping.layers.0.bias"]
        errs = _model_check(gen, lambda gen=gen: gen(z), small, seed=4)
        out.append((f"generator_{variant}_params", errs[0], MODEL_TOL))
        out.append((f"generator_{variant}_directional", errs[1], MODEL_TOL))
        out.append((f"generator_{variant}_latent", _fd(lambda zz, gen=gen: gen(zz), [z]), MODEL_TOL))
    return out


def _discriminator_suite(rng) -> list[tuple[str, float, float]]:
    img = rng.standard_normal((4, 8, 8, 3))
    feat = rng.standard_normal((4, 2, 2, 3))
    out = [("minibatch_stddev", _fd(lambda a: minibatch_stddev(a, 2), [feat], smooth=True), PRIMITIVE_TOL)]
    with default_dtype(np.float64):
        block = ResidualBlock(3, 4, np.random.default_rng(5))
        disc = Discriminator(tiny_discriminator_config(), seed=6)
    out.append(("residual_block", _fd(lambda a: block(a), [rng.standard_normal((2, 4, 4, 3))]), MODEL_TOL))
    errs = _model_check(disc, lambda: disc(img), ["out.weight", "final_conv.bias", "from_rgb.weight"], seed=7)
    out.append(("discriminator_params", errs[0], MODEL_TOL))
    out.append(("discriminator_directional", errs[1], MODEL_TOL))
    out.append(("discriminator_input", _fd(lambda a: disc(a), [img]), MODEL_TOL))
    return out


def _losses_suite(rng) -> list[tuple[str, float, float]]:
    from .training import d_loss, g_loss, r1_penalty

    logits = rng.standard_normal((6, 1)) * 2
    other = rng.standard_normal((6, 1)) * 2
    img = rng.standard_normal((4, 8, 8, 3))
    with default_dtype(np.float64):
        disc = Discriminator(tiny_discriminator_config(), seed=8)
    out = [
        ("g_loss", _fd(lambda a: g_loss(a), [logits], smooth=True), MODEL_TOL),
        ("d_loss", _fd(lambda a, b: d_loss(a, b), [logits, other], smooth=True), MODEL_TOL),
    ]
    call = lambda: r1_penalty(disc, img, 2.0)  # noqa: E731
    errs = _model_check(disc, call, ["out.weight", "final_linear.bias"], seed=9)
    out.append(("r1_penalty_params", errs[0], MODEL_TOL))
    out.append(("r1_penalty_directional", errs[1], MODEL_TOL))
    return out


SCOPES: dict[str, Callable] = {
    "tensor": _tensor_suite,
    "ops": _ops_suite,
    "folding": _folding_suite,
    "modconv": _modconv_suite,
    "generator": _generator_suite,
    "discriminator": _discriminator_suite,
    "losses": _losses_suite,
}


def run_scope(scope: str, seed: int = 0) -> list[Check]:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SCOPES)} or 'all'")
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        return [Check(scope, name, float(err), tol) for name, err, tol in SCOPES[scope](rng)]


def run_all(seed: int = 0) -> list[Check]:
    out: list[Check] = []
    for scope in SCOPES:
        out.extend(run_scope(scope, seed))
    return out
