import numpy as np
import pytest

from pixfold.config import DiscriminatorConfig
from pixfold.discriminator import Discriminator, ResidualBlock, minibatch_stddev
from pixfold.ops import avg_downsample2x, conv2d, fused_leaky_relu
from pixfold.tensor import ShapeError, Tensor, grad


def test_mbstd_identical_samples_zero_channel():
    x = np.repeat(np.random.default_rng(0).standard_normal((1, 3, 3, 2)), 4, axis=0)
    out = minibatch_stddev(x, 4).data
    assert out.shape == (4, 3, 3, 3)
    np.testing.assert_allclose(out[..., -1], np.sqrt(1e-8), rtol=1e-6)


def test_mbstd_offset_pair_gives_half():
    a = np.random.default_rng(1).standard_normal((1, 2, 2, 3))
    out = minibatch_stddev(np.concatenate([a, a + 1]), 2).data
    np.testing.assert_allclose(out[..., -1], 0.5, rtol=1e-6)


def test_mbstd_errors():
    with pytest.raises(ShapeError):
        minibatch_stddev(np.zeros((0, 2, 2, 1)))
    with pytest.raises(ShapeError):
        minibatch_stddev(np.zeros((6, 2, 2, 1)), 4)


def test_residual_block_zero_and_oracle(rng):
    block = ResidualBlock(3, 5, rng)
    for p in block.parameters():
        p.data[:] = 0.0
    assert np.all(block(np.ones((1, 8, 8, 3))).data == 0.0)
    block = ResidualBlock(3, 5, rng)
    x = rng.standard_normal((2, 32, 32, 3))
    out = block(x).data
    assert out.shape == (2, 16, 16, 5)
    c1, c2, sk = block.conv1, block.conv2, block.skip
    h = fused_leaky_relu(conv2d(x, c1.weight.data * c1.scale), c1.bias.data).data
    h = fused_leaky_relu(conv2d(h, c2.weight.data * c2.scale), c2.bias.data).data
    main = avg_downsample2x(h).data
    skip = conv2d(avg_downsample2x(x).data, sk.weight.data * sk.scale).data
    np.testing.assert_allclose(out, (main + skip) / np.sqrt(2), atol=1e-12)


def test_discriminator_shape_determinism_and_input_grad(rng):
    cfg = DiscriminatorConfig(input_resolution=16, base_channels=4, max_channels=16)
    d1, d2 = Discriminator(cfg, seed=3), Discriminator(cfg, seed=3)
    x = rng.standard_normal((4, 16, 16, 3))
    assert d1(x).shape == (4, 1)
    assert np.array_equal(d1(x).data, d2(x).data)
    xt = Tensor(x, requires_grad=True)
    (g,) = grad(d1(xt).sum(), [xt])
    assert g.shape == x.shape and np.all(np.isfinite(g.data)) and np.any(g.data != 0)
    with pytest.raises(ShapeError):
        d1(np.zeros((2, 8, 8, 3)))
