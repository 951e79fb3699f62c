import numpy as np
import pytest

from pixfold.modconv import ModConv, ToRGB, affine_style, modulate
from pixfold.tensor import ShapeError, Tensor, default_dtype, no_grad


def test_modulate_unit_output_norms(rng):
    k = rng.standard_normal((3, 3, 4, 5))
    out = modulate(k, np.ones(4)).data
    np.testing.assert_allclose(np.sqrt((out ** 2).sum(axis=(0, 1, 2))), 1.0, atol=1e-8)
    assert np.array_equal(modulate(k, np.ones(4), demodulate=False).data, k)


def test_modulate_scale_invariance_and_per_sample(rng):
    k = rng.standard_normal((3, 3, 4, 5))
    s = rng.uniform(0.5, 2.0, size=(3, 4))
    base = modulate(k, s).data
    assert base.shape == (3, 3, 3, 4, 5)
    np.testing.assert_allclose(modulate(k, 7.5 * s).data, base, rtol=1e-7)
    for i in range(3):
        np.testing.assert_allclose(base[i], modulate(k, s[i]).data, rtol=1e-14)
    with pytest.raises(ShapeError):
        modulate(k, np.ones(3))


def test_affine_style_cases(rng):
    layer = ModConv(4, 4, 3, 6, rng)
    layer.affine.weight.data[:] = 0.0
    np.testing.assert_array_equal(affine_style(layer, rng.standard_normal((2, 6))).data, np.ones((2, 4)))
    layer = ModConv(4, 4, 3, 6, rng)
    np.testing.assert_array_equal(affine_style(layer, np.zeros((1, 6))).data, np.ones((1, 4)))
    w = rng.standard_normal(6)
    oracle = [sum(w[i] * layer.affine.weight.data[i, c] * layer.affine.scale for i in range(6)) + 1.0 for c in range(4)]
    np.testing.assert_allclose(affine_style(layer, w).data, oracle, atol=1e-12)


@pytest.mark.parametrize("up", [False, True])
def test_fast_path_matches_kernel_modulation_float32(rng, up):
    with default_dtype(np.float32):
        layer = ModConv(16, 24, 3, 8, rng, up=up)
        x = rng.standard_normal((3, 6, 6, 16)).astype(np.float32)
        w = rng.standard_normal((3, 8)).astype(np.float32)
        with no_grad():
            fast = layer(x, w).data
            layer.fused = True
            ref = layer(x, w).data
    assert fast.shape == ((3, 12, 12, 24) if up else (3, 6, 6, 24))
    assert np.max(np.abs(fast - ref)) / np.max(np.abs(ref)) < 1e-6


def test_modconv_reference_shapes():
    rng = np.random.default_rng(0)
    layer = ModConv(512, 512, 3, 16, rng)
    assert layer.num_params() == 2_359_296 + 512 + 16 * 512 + 512
    with no_grad():
        assert layer(np.zeros((1, 4, 4, 512)), np.zeros((1, 16))).shape == (1, 4, 4, 512)
    layer = ModConv(128, 512, 3, 16, rng)
    with no_grad():
        assert layer(np.zeros((1, 8, 8, 128)), np.zeros((1, 16))).shape == (1, 8, 8, 512)


def test_full_width_modconv_params():
    layer = ModConv(512, 512, 3, 512, np.random.default_rng(0))
    assert layer.num_params() == 2_622_464


def test_zero_input_gives_constant_bias_image(rng):
    layer = ModConv(4, 6, 3, 5, rng)
    layer.bias.data[:] = rng.standard_normal(6)
    out = layer(np.zeros((1, 5, 5, 4)), rng.standard_normal((1, 5))).data
    assert np.allclose(out, out[0, 0, 0])


def test_channel_mismatch_is_reported(rng):
    with pytest.raises(ShapeError, match="axis 3"):
        ModConv(4, 4, 3, 2, rng)(np.zeros((1, 3, 3, 5)), np.zeros((1, 2)))


def test_to_rgb_matches_per_pixel_affine(rng):
    layer = ToRGB(8, 5, rng)
    x = rng.standard_normal((2, 4, 4, 8))
    w = rng.standard_normal((2, 5))
    out = layer(x, w).data
    assert out.shape == (2, 4, 4, 3)
    s = layer.affine(w).data
    kern = layer.weight.data[0, 0] * layer.scale
    for n in range(2):
        expect = (x[n] * s[n]) @ kern + layer.bias.data
        np.testing.assert_allclose(out[n], expect, atol=1e-12)
    assert np.all(ToRGB(8, 5, rng)(np.zeros((1, 2, 2, 8)), w[:1]).data == 0.0)


def test_demodulated_layer_is_style_scale_invariant(rng):
    for _ in range(50):
        cin, cout = rng.integers(1, 6, size=2)
        layer = ModConv(int(cin), int(cout), 3, 4, rng, activate=False)
        x = rng.standard_normal((2, 4, 4, int(cin)))
        s = rng.uniform(0.5, 2.0, size=(2, int(cin)))
        c = 10.0 ** rng.uniform(-1, 1)
        a = layer(x, None, styles=Tensor(s)).data
        b = layer(x, None, styles=Tensor(c * s)).data
        assert np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12) < 1e-5
