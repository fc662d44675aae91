import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import direct_softmax, naive_conv, naive_matmul
from layoutgen.tensor import (ADJOINTS, NEG_INF, DimensionError, MaskedRowError, avgpool2, conv2d, matmul,
                              resize_bilinear, softmax_lastdim, upsample2)


def test_matmul_identity_and_hand_case():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(np.eye(3), b), b)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_naive_oracle(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_softmax_cases():
    assert np.allclose(softmax_lastdim(np.zeros(3)), [1 / 3] * 3, atol=0, rtol=1e-15)
    w = softmax_lastdim(np.array([0.0, NEG_INF]))
    assert w[0] == 1.0 and w[1] == 0.0
    assert np.abs(softmax_lastdim(np.array([1.0, 2.0, 3.0])) - direct_softmax([1, 2, 3])).max() < 1e-12


def test_softmax_fully_masked_row():
    with pytest.raises(MaskedRowError):
        softmax_lastdim(np.array([[0.0, 1.0], [NEG_INF, NEG_INF]]))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    w = softmax_lastdim(x)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert (w >= 0).all()


def test_conv_zero_and_identity(rng):
    x = rng.standard_normal((2, 5, 5))
    assert not conv2d(x, np.zeros((3, 2, 3, 3)), np.zeros(3)).any()
    ident = np.eye(2)[:, :, None, None]
    assert np.array_equal(conv2d(x, ident, np.zeros(2)), x)


def test_conv_naive_oracle(rng):
    x = rng.standard_normal((2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    assert np.abs(conv2d(x, w, b) - naive_conv(x, w, b)).max() < 1e-12


def test_conv_batch_matches_single(rng):
    x = rng.standard_normal((3, 2, 6, 7))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    batched = conv2d(x, w, b)
    for i in range(3):
        assert np.abs(batched[i] - conv2d(x[i], w, b)).max() < 1e-12


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(np.zeros((3, 4, 4)), np.zeros((2, 2, 3, 3)), np.zeros(2))


def test_conv_float32_stays_float32(rng):
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    assert conv2d(x, w, np.zeros(2, np.float32)).dtype == np.float32


def test_resize_cases():
    x = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(resize_bilinear(x, 3, 4), x)
    assert np.allclose(resize_bilinear(np.full((3, 5), 0.7), 8, 2), 0.7, atol=1e-15)
    out = resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
    assert np.allclose(out, [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-15)


def test_pool_and_upsample():
    x = np.arange(16.0).reshape(1, 4, 4)
    assert np.array_equal(avgpool2(x)[0], [[2.5, 4.5], [10.5, 12.5]])
    u = upsample2(np.array([[[1.0, 2.0]]]))
    assert np.array_equal(u[0], [[1, 1, 2, 2], [1, 1, 2, 2]])


def _fd_vjp(f, x, g, h=1e-6):
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = ((f(xp) - f(xm)) * g).sum() / (2 * h)
    return out


def _rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def test_adjoint_pairs_against_finite_differences(rng):
    """Every registered adjoint is the transpose of its forward's Jacobian."""
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    g = rng.standard_normal((3, 2))
    da, db = ADJOINTS["matmul"].adjoint(a, b, g)
    assert _rel(da, _fd_vjp(lambda v: matmul(v, b), a, g)) < 1e-6
    assert _rel(db, _fd_vjp(lambda v: matmul(a, v), b, g)) < 1e-6

    x = rng.standard_normal((3, 5))
    g = rng.standard_normal((3, 5))
    assert _rel(ADJOINTS["softmax_lastdim"].adjoint(x, g), _fd_vjp(softmax_lastdim, x, g)) < 1e-6

    for k in (1, 3):
        x = rng.standard_normal((2, 3, 5, 4))
        w = rng.standard_normal((2, 3, k, k))
        bias = rng.standard_normal(2)
        g = rng.standard_normal((2, 2, 5, 4))
        dx, dw, dbias = ADJOINTS["conv2d"].adjoint(x, w, bias, g)
        assert _rel(dx, _fd_vjp(lambda v: conv2d(v, w, bias), x, g)) < 1e-6
        assert _rel(dw, _fd_vjp(lambda v: conv2d(x, v, bias), w, g)) < 1e-6
        assert _rel(dbias, _fd_vjp(lambda v: conv2d(x, w, v), bias, g)) < 1e-6

    x = rng.standard_normal((2, 3, 4))
    g = rng.standard_normal((2, 5, 7))
    assert _rel(ADJOINTS["resize_bilinear"].adjoint(x, 5, 7, g),
                _fd_vjp(lambda v: resize_bilinear(v, 5, 7), x, g)) < 1e-6

    x = rng.standard_normal((2, 4, 6))
    g = rng.standard_normal((2, 2, 3))
    assert _rel(ADJOINTS["avgpool2"].adjoint(x, g), _fd_vjp(avgpool2, x, g)) < 1e-6
    g = rng.standard_normal((2, 8, 12))
    assert _rel(ADJOINTS["upsample2"].adjoint(x, g), _fd_vjp(upsample2, x, g)) < 1e-6
    g = rng.standard_normal((2, 4, 6))
    assert _rel(ADJOINTS["silu"].adjoint(x, g), _fd_vjp(ADJOINTS["silu"].forward, x, g)) < 1e-6
