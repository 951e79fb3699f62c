import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixfold.folding import FoldSpec, fold, fold_array, unfold, unfold_array
from pixfold.tensor import ShapeError, Tensor, grad


@st.composite
def fold_cases(draw):
    k = draw(st.sampled_from([2, 3, 4]))
    n = draw(st.integers(1, 3))
    h, w = draw(st.integers(1, 3)) * k, draw(st.integers(1, 3)) * k
    c = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**31 - 1))
    return k, np.random.default_rng(seed).standard_normal((n, h, w, c))


@settings(max_examples=200, deadline=None)
@given(fold_cases())
def test_fold_properties(case):
    k, t = case
    folded = fold_array(t, k)
    n, h, w, c = t.shape
    assert folded.shape == (n, h // k, w // k, c * k * k)
    assert np.array_equal(unfold_array(folded, k), t)
    assert np.array_equal(np.sort(folded, axis=None), np.sort(t, axis=None))


def test_fold_index_formula():
    k, c = 3, 2
    t = np.arange(1 * 6 * 6 * c, dtype=float).reshape(1, 6, 6, c)
    f = fold_array(t, k)
    for y in range(2):
        for x in range(2):
            for dy in range(k):
                for dx in range(k):
                    for ch in range(c):
                        assert f[0, y, x, (dy * k + dx) * c + ch] == t[0, y * k + dy, x * k + dx, ch]


def test_fold_gradient_is_inverse_permutation(rng):
    t = Tensor(rng.standard_normal((2, 4, 6, 3)), requires_grad=True)
    g = rng.standard_normal((2, 2, 3, 12))
    (gt,) = grad((fold(t, 2) * Tensor(g)).sum(), [t])
    assert np.array_equal(gt.data, unfold_array(g, 2))
    u = Tensor(rng.standard_normal((2, 2, 3, 12)), requires_grad=True)
    g2 = rng.standard_normal((2, 4, 6, 3))
    (gu,) = grad((unfold(u, 2) * Tensor(g2)).sum(), [u])
    assert np.array_equal(gu.data, fold_array(g2, 2))


def test_fold_errors_name_axis():
    with pytest.raises(ShapeError, match="axis 1"):
        fold_array(np.zeros((1, 5, 4, 1)), 2)
    with pytest.raises(ShapeError, match="axis 2"):
        fold_array(np.zeros((1, 4, 5, 1)), 2)
    with pytest.raises(ShapeError, match="axis 3"):
        unfold_array(np.zeros((1, 2, 2, 6)), 2)
    with pytest.raises(ValueError):
        FoldSpec(1)
