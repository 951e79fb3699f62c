import numpy as np
import pytest

from pixfold import ops
from pixfold.tensor import ShapeError, Tensor, grad


def naive_conv(x, w, stride, pad):
    """Direct 7-loop cross-correlation oracle."""
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                patch = xp[b, i * stride : i * stride + k, j * stride : j * stride + k]
                out[b, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2]))
    return out


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)])
def test_conv2d_matches_direct_loops(rng, k, stride, pad):
    x = rng.standard_normal((2, 7, 6, 3))
    w = rng.standard_normal((k, k, 3, 5))
    out = ops.conv2d(x, w, stride=stride, padding=pad).data
    np.testing.assert_allclose(out, naive_conv(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_per_sample_kernels_match_separate_convs(rng):
    x = rng.standard_normal((3, 5, 5, 2))
    w = rng.standard_normal((3, 3, 3, 2, 4))
    out = ops.conv2d(x, w).data
    for i in range(3):
        np.testing.assert_allclose(out[i], naive_conv(x[i : i + 1], w[i], 1, 1)[0], atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.standard_normal((2, 6, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    y = rng.standard_normal((2, 3, 3, 4))
    lhs = np.sum(ops.conv2d(x, w, stride=2, padding=1).data * y)
    rhs = np.sum(x * ops.conv_transpose2d(y, w, 2, 1, (6, 6)).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_transposed_conv_doubles_resolution(rng):
    x = rng.standard_normal((1, 4, 4, 3))
    out = ops.transposed_conv2d(x, rng.standard_normal((3, 3, 5, 3)), 2)
    assert out.shape == (1, 8, 8, 5)


def test_conv_results_are_batch_invariant_bitwise(rng):
    x = rng.standard_normal((4, 6, 6, 8)).astype(np.float32)
    w = rng.standard_normal((3, 3, 8, 16)).astype(np.float32)
    full = ops.conv2d(x, w).data
    for i in range(4):
        assert np.array_equal(full[i : i + 1], ops.conv2d(x[i : i + 1], w).data)
    lw = rng.standard_normal((8, 5)).astype(np.float32)
    full = ops.linear(x, lw).data
    assert np.array_equal(full[2:3], ops.linear(x[2:3], lw).data)


def test_mac_counter_counts_conv_and_linear(rng):
    with ops.mac_counter() as c:
        ops.conv2d(np.zeros((1, 4, 4, 512)), np.zeros((3, 3, 512, 512)))
    # 16 positions * 3*3*512*512
    assert c.total == 37_748_736
    with ops.mac_counter() as c:
        ops.linear(np.zeros((2, 3, 7)), np.zeros((7, 5)))
        ops.linear(np.zeros((2, 7)), np.zeros((7, 5)), counted=False)
    assert c.total == 2 * 3 * 7 * 5
    with ops.mac_counter() as c:
        ops.transposed_conv2d(np.zeros((1, 4, 4, 6)), np.zeros((3, 3, 2, 6)))
    assert c.total == 16 * 9 * 6 * 2


def test_counter_idle_outside_context(rng):
    with ops.mac_counter() as c:
        pass
    ops.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 2, 2)))
    assert c.total == 0


def test_conv_shape_errors_name_axis():
    with pytest.raises(ShapeError, match="axis 3"):
        ops.conv2d(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2, 4)))
    with pytest.raises(ShapeError):
        ops.conv2d(np.zeros((4, 4, 3)), np.zeros((3, 3, 3, 4)))


def test_fused_leaky_relu_values():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    out = ops.fused_leaky_relu(x, np.array([0.5, 0.5, 0.5])).data
    np.testing.assert_allclose(out, np.sqrt(2) * np.array([-0.1, 0.5, 2.5]))
    with pytest.raises(ValueError):
        ops.leaky_relu(x, slope=1.5)


def test_upsample_and_sum_pool_are_adjoint(rng):
    x = rng.standard_normal((1, 3, 3, 2))
    y = rng.standard_normal((1, 6, 6, 2))
    assert np.sum(ops.upsample_nearest(x, 2).data * y) == pytest.approx(np.sum(x * ops.sum_pool(y, 2).data))
    np.testing.assert_allclose(ops.avg_downsample2x(np.ones((1, 4, 4, 1))).data, np.ones((1, 2, 2, 1)))


def test_conv_weight_grad_matches_autograd(rng):
    x = Tensor(rng.standard_normal((2, 5, 5, 3)))
    w = Tensor(rng.standard_normal((3, 3, 3, 4)), requires_grad=True)
    g = rng.standard_normal((2, 5, 5, 4))
    (gw,) = grad((ops.conv2d(x, w) * Tensor(g)).sum(), [w])
    np.testing.assert_allclose(gw.data, ops.conv2d_weight_grad(x, g, 3, 1, 1).data, atol=1e-12)
