import itertools

import numpy as np
import pytest

from vectorir.nn import layers as L
from vectorir.nn.gradcheck import numeric_grad, rel_error


def naive_conv(x, w, b):
    """Direct loops over output positions; zero padding by bounds checks."""
    k = w.shape[2:]
    out = np.zeros((w.shape[0],) + x.shape[1:])
    for o in range(w.shape[0]):
        for pos in np.ndindex(x.shape[1:]):
            acc = b[o]
            for off in np.ndindex(k):
                src = tuple(p + q - kk // 2 for p, q, kk in zip(pos, off, k))
                if all(0 <= s < n for s, n in zip(src, x.shape[1:])):
                    acc += w[(o, slice(None)) + off] @ x[(slice(None),) + src]
            out[(o,) + pos] = acc
    return out


@pytest.mark.parametrize("shape, kern", [((2, 5, 4), (3, 3)), ((2, 3, 4, 4), (3, 3, 3)), ((1, 6), (5,))])
def test_conv_matches_loops(shape, kern):
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    w = rng.normal(size=(3, shape[0]) + kern)
    b = rng.normal(size=3)
    np.testing.assert_allclose(L.conv_forward(x, w, b)[0], naive_conv(x, w, b), atol=1e-12)


@pytest.mark.parametrize("shape, kern", [((2, 4, 6), (3, 3)), ((2, 4, 4, 4), (3, 3, 3))])
def test_conv_gradients(shape, kern):
    rng = np.random.default_rng(1)
    x = rng.normal(size=shape)
    w = rng.normal(size=(2, shape[0]) + kern)
    b = rng.normal(size=2)
    g = rng.normal(size=(2,) + shape[1:])

    def f():
        return float(np.sum(L.conv_forward(x, w, b)[0] * g))

    _, cache = L.conv_forward(x, w, b)
    dx, dw, db = L.conv_backward(g, cache)
    for analytic, wrt in ((dx, x), (dw, w), (db, b)):
        assert rel_error(analytic, numeric_grad(f, wrt, h=1e-2)).max() < 1e-7
    assert L.conv_backward(g, cache, need_dx=False)[0] is None


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        L.conv_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


@pytest.mark.parametrize("shape", [(2, 4, 6), (3, 2, 4, 4)])
def test_maxpool_matches_brute_force(shape):
    rng = np.random.default_rng(2)
    x = rng.permutation(np.prod(shape)).reshape(shape).astype(float)  # distinct, no ties
    y, cache = L.maxpool_forward(x)
    nd = len(shape) - 1
    want = np.zeros(y.shape)
    for c in range(shape[0]):
        for pos in np.ndindex(y.shape[1:]):
            cells = [x[(c,) + tuple(2 * p + o for p, o in zip(pos, off))]
                     for off in itertools.product((0, 1), repeat=nd)]
            want[(c,) + pos] = max(cells)
    assert np.array_equal(y, want)
    g = rng.normal(size=y.shape)
    dx = L.maxpool_backward(g, cache)
    # gradient lands only on each window's maximum
    assert np.count_nonzero(dx) == y.size
    assert np.sum(dx * x) == pytest.approx(np.sum(g * y))
    with pytest.raises(ValueError):
        L.maxpool_forward(np.zeros((1, 3, 4)))


def test_relu_temporal_upsample_concat():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4, 4))
    y, m = L.relu_forward(x)
    assert np.all(y >= 0) and np.array_equal(L.relu_backward(np.ones_like(x), m), (x > 0) * 1.0)

    s, d = L.temporal_sum_forward(x)
    np.testing.assert_allclose(s, x[:, 0] + x[:, 1] + x[:, 2])
    g = rng.normal(size=s.shape)
    assert np.sum(L.temporal_sum_backward(g, d) * x) == pytest.approx(np.sum(g * s))

    u, _ = L.upsample_forward(x[:, 0])
    assert u.shape == (2, 8, 8) and u[1, 5, 2] == x[1, 0, 2, 1]
    gu = rng.normal(size=u.shape)
    assert np.sum(L.upsample_backward(gu) * x[:, 0]) == pytest.approx(np.sum(gu * u))

    c, sizes = L.concat_forward([x[:1, 0], x[:, 1]])
    a, b = L.concat_backward(c, sizes)
    assert np.array_equal(a, x[:1, 0]) and np.array_equal(b, x[:, 1])


def test_regression_head_examples():
    beta = np.zeros((2, 2, 3))
    beta[:, 1, 2] = [2.0, -1.0]
    beta[:, 0, 0] = [0.5, 0.5]
    loc = np.array([[1, 2], [0, 0], [1, 2]])
    fvec = np.array([[1.0, 1.0], [4.0, 2.0], [0.0, 3.0]])
    pred, cache = L.regression_forward(beta, loc, fvec)
    assert pred.tolist() == [1.0, 3.0, -3.0]
    d = L.regression_backward(np.array([1.0, 1.0, 1.0]), cache)
    assert d[:, 1, 2].tolist() == [1.0, 4.0] and d[:, 0, 0].tolist() == [4.0, 2.0]
    assert np.count_nonzero(d) == 4

    pb, _ = L.regression_forward(np.ones((3, 2, 3)), loc, fvec, bias=True)
    np.testing.assert_allclose(pb, fvec.sum(axis=1) + 1.0)
    with pytest.raises(ValueError, match="coefficients"):
        L.regression_forward(beta, loc, np.ones((3, 3)))
    with pytest.raises(ValueError, match="outside"):
        L.regression_forward(beta, np.array([[2, 0]]), np.ones((1, 2)))


def test_regression_gradient_numeric():
    rng = np.random.default_rng(4)
    beta = rng.normal(size=(3, 4, 5))
    loc = np.c_[rng.integers(0, 4, 30), rng.integers(0, 5, 30)]
    fvec = rng.normal(size=(30, 2))
    g = rng.normal(size=30)

    def f():
        return float(L.regression_forward(beta, loc, fvec, bias=True)[0] @ g)

    _, cache = L.regression_forward(beta, loc, fvec, bias=True)
    assert rel_error(L.regression_backward(g, cache), numeric_grad(f, beta, 1e-5)).max() < 1e-7
