import numpy as np
import pytest

from pixfold.config import reference_config
from pixfold.coords import (
    CoordGrid,
    PixelInit,
    fourier_features,
    init_pixel_tensor,
    normalize_coords,
    reduce_before_fold,
)
from pixfold.nn import EqualLinear
from pixfold.tensor import ShapeError, Tensor, grad


def test_normalized_coordinate_endpoints():
    c = normalize_coords(CoordGrid(256, 256))
    assert c[0, 0, 0] == -1.0 and c[0, 255, 0] == 1.0
    assert c[0, 128, 0] == pytest.approx(1 / 255, abs=1e-15)
    assert c[255, 0, 1] == 1.0
    # mirrored pixels negate exactly
    assert np.array_equal(c[:, ::-1, 0], -c[:, :, 0])


def test_normalize_rejects_tiny_grid():
    with pytest.raises(ValueError):
        normalize_coords(CoordGrid(1, 4))


def test_fourier_features_against_scalar_loop(rng):
    basis = rng.standard_normal((2, 5))
    normed = normalize_coords(CoordGrid(3, 3))
    out = fourier_features(basis, normed).data
    assert np.all(out[1, 1] == 0.0)
    for y in range(3):
        for x in range(3):
            xp, yp = normed[y, x]
            for ch in range(5):
                assert out[y, x, ch] == pytest.approx(np.sin(basis[0, ch] * xp + basis[1, ch] * yp), abs=1e-14)
    assert np.all(fourier_features(np.zeros((2, 5)), normed).data == 0.0)


def test_fourier_features_differentiable_in_basis(rng):
    basis = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    normed = normalize_coords(CoordGrid(4, 4))
    (g,) = grad(fourier_features(basis, normed).sum(), [basis])
    expect = np.einsum("hwi,hwc->ic", normed, np.cos(normed @ basis.data))
    np.testing.assert_allclose(g.data, expect, atol=1e-12)


def test_fourier_features_shape_errors():
    with pytest.raises(ShapeError):
        fourier_features(np.zeros((3, 4)), np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        fourier_features(np.zeros((2, 4)), np.zeros((2, 2, 3)))


def test_reference_init_shapes():
    cfg = reference_config()
    rng = np.random.default_rng(0)
    e0 = PixelInit(0, 16, 512, rng)(1)
    assert e0.shape == (1, 16, 16, 512) and e0.stage == 0
    e2 = PixelInit(2, 256, 128, rng)(1)
    assert e2.shape == (1, 256, 256, 128)
    assert e2.data.shape[-1] == cfg.init_dims[2]


def test_identity_projection_passes_fourier_features(rng):
    cfg = reference_config()
    cfg.stage_resolutions, cfg.init_dims, cfg.block_channels = [4], [6], [8]
    module = PixelInit(0, 4, 6, rng)
    params = dict(module.named_parameters())
    state = {k: v.data.copy() for k, v in params.items()}
    state["coord_embed"][:] = 0.0
    w = np.zeros((12, 6))
    w[:6] = np.eye(6) * np.sqrt(12)       # undo the fan-in scale
    state["proj.weight"], state["proj.bias"] = w, np.zeros(6)
    out = init_pixel_tensor(0, cfg, state).data.data
    expect = fourier_features(state["fourier"], normalize_coords(CoordGrid(4, 4))).data
    np.testing.assert_allclose(out[0], expect, atol=1e-12)


def test_init_pixel_tensor_errors(rng):
    cfg = reference_config()
    with pytest.raises(ValueError):
        init_pixel_tensor(3, cfg, {})
    with pytest.raises(KeyError, match="missing"):
        init_pixel_tensor(1, cfg, {"fourier": np.zeros((2, 512))})


def test_reduce_before_fold(rng):
    layer = EqualLinear(512, 32, rng)
    e = PixelInit(0, 16, 512, rng)(1)
    out = reduce_before_fold(layer, e)
    assert out.shape == (1, 16, 16, 32)
    zero = type(e)(Tensor(np.zeros((1, 16, 16, 512))), 0)
    assert np.all(reduce_before_fold(layer, zero).data.data == 0.0)
    x = rng.standard_normal((1, 2, 2, 512))
    oracle = np.zeros((2, 2, 32))
    for i in range(2):
        for j in range(2):
            oracle[i, j] = x[0, i, j] @ (layer.weight.data * layer.scale)
    np.testing.assert_allclose(reduce_before_fold(layer, type(e)(Tensor(x), 0)).data.data[0], oracle, atol=1e-12)
