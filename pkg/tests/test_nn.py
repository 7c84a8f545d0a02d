import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from labelbridge import nn
from conftest import central_diff, rel_err


def conv_direct(K, X):
    """Quadruple-loop convolution used as an oracle."""
    cout, cin, kh, kw = K.shape
    _, h, w = X.shape
    Z = np.zeros((cout, h - kh + 1, w - kw + 1))
    for k in range(cout):
        for i in range(Z.shape[1]):
            for j in range(Z.shape[2]):
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            Z[k, i, j] += K[k, c, a, b] * X[c, i + a, j + b]
    return Z


# --- FC ----------------------------------------------------------------------

def test_fc_forward_identity():
    np.testing.assert_array_equal(nn.fc_forward(np.eye(2), [2, 3]), [2, 3])


def test_fc_forward_hand_multiply():
    np.testing.assert_array_equal(nn.fc_forward([[1, 2], [3, 4]], [1, 1]), [3, 7])


def test_fc_forward_zero_weight():
    np.testing.assert_array_equal(nn.fc_forward(np.zeros((2, 2)), [5, 7]), [0, 0])


def test_fc_forward_shape_mismatch():
    with pytest.raises(nn.DimensionError):
        nn.fc_forward(np.eye(2), [1, 2, 3])


def test_fc_backward_identity():
    gW, gx = nn.fc_backward(np.eye(2), [2, 3], [1, 1])
    np.testing.assert_array_equal(gW, [[2, 3], [2, 3]])
    np.testing.assert_array_equal(gx, [1, 1])


def test_fc_backward_zero_upstream():
    gW, gx = nn.fc_backward(np.ones((2, 3)), [1, 2, 3], [0, 0])
    assert not gW.any() and not gx.any()


def test_fc_backward_finite_difference(rng):
    W, x, c = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 3)
    gW, gx = nn.fc_backward(W, x, c)
    assert rel_err(gW, central_diff(lambda w: c @ nn.fc_forward(w, x), W)) < 1e-5
    assert rel_err(gx, central_diff(lambda v: c @ nn.fc_forward(W, v), x)) < 1e-5


def test_fc_backward_shape_mismatch():
    with pytest.raises(nn.DimensionError):
        nn.fc_backward(np.eye(2), [1, 2], [1, 2, 3])


def test_batch_fc_matches_single(rng):
    W, X, G = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(nn.batch_fc_forward(W, X), [nn.fc_forward(W, x) for x in X])
    gW, gX = nn.batch_fc_backward(W, X, G)
    singles = [nn.fc_backward(W, x, g) for x, g in zip(X, G)]
    np.testing.assert_allclose(gW, np.mean([s[0] for s in singles], axis=0), atol=1e-15)
    np.testing.assert_allclose(gX, [s[1] for s in singles], atol=1e-15)


# --- Conv --------------------------------------------------------------------

def test_conv_identity_1x1():
    np.testing.assert_array_equal(nn.conv_forward(np.ones((1, 1, 1, 1)), [[[3.0]]]), [[[3.0]]])


def test_conv_all_ones_2x2():
    X = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(nn.conv_forward(np.ones((1, 1, 2, 2)), X), [[[10.0]]])


def test_conv_zero_kernel(rng):
    Z = nn.conv_forward(np.zeros((2, 3, 2, 2)), rng.normal(size=(3, 4, 4)))
    assert Z.shape == (2, 3, 3) and not Z.any()


def test_conv_forward_matches_direct_loops(rng):
    K, X = rng.normal(size=(3, 2, 2, 3)), rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose(nn.conv_forward(K, X), conv_direct(K, X), atol=1e-12)


def test_conv_rejects_oversized_kernel():
    with pytest.raises(nn.DimensionError):
        nn.conv_forward(np.ones((1, 1, 3, 3)), np.ones((1, 2, 2)))


def test_conv_backward_weights_zero():
    gK = nn.conv_backward_weights(np.ones((1, 1, 2, 2)), np.ones((1, 3, 3)), np.zeros((1, 2, 2)))
    assert not gK.any()


def test_conv_backward_weights_hand_case():
    X = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    gK = nn.conv_backward_weights(np.ones((1, 1, 2, 2)), X, np.ones((1, 1, 1)))
    np.testing.assert_array_equal(gK, [[[[1, 2], [3, 4]]]])


def test_conv_backward_finite_difference(rng):
    K, X, C = rng.uniform(-1, 1, (2, 2, 2, 2)), rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (2, 2, 3))
    gK = nn.conv_backward_weights(K, X, C)
    assert rel_err(gK, central_diff(lambda k: np.sum(C * nn.conv_forward(k, X)), K)) < 1e-5
    gX = nn.conv_backward_input(K, X, C)
    assert rel_err(gX, central_diff(lambda v: np.sum(C * nn.conv_forward(K, v)), X)) < 1e-5


def test_conv_backward_shape_mismatch():
    with pytest.raises(nn.DimensionError):
        nn.conv_backward_weights(np.ones((1, 1, 2, 2)), np.ones((1, 3, 3)), np.ones((1, 3, 3)))


def test_batch_conv_matches_single(rng):
    K, X = rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(4, 2, 3, 3))
    G = rng.normal(size=(4, 3, 2, 2))
    np.testing.assert_allclose(nn.batch_conv_forward(K, X), [nn.conv_forward(K, x) for x in X], atol=1e-12)
    gK, _ = nn.batch_conv_backward(K, X, G)
    expected = np.mean([nn.conv_backward_weights(K, x, g) for x, g in zip(X, G)], axis=0)
    np.testing.assert_allclose(gK, expected, atol=1e-12)


# --- ReLU ----------------------------------------------------------------------

def test_relu_forward_cases():
    np.testing.assert_array_equal(nn.relu_forward([-1, 0, 2]), [0, 0, 2])
    np.testing.assert_array_equal(nn.relu_forward([1.5, 2.0]), [1.5, 2.0])
    np.testing.assert_array_equal(nn.relu_forward([-1.5, -2.0]), [0, 0])


def test_relu_backward_cases():
    np.testing.assert_array_equal(nn.relu_backward([1, -1], [5, 5]), [5, 0])
    np.testing.assert_array_equal(nn.relu_backward([0.0], [3.0]), [0.0])


def test_relu_backward_shape_mismatch():
    with pytest.raises(nn.DimensionError):
        nn.relu_backward([1, 2], [1])


def test_relu_backward_finite_difference(rng):
    z = rng.uniform(-1, 1, 12)
    z = z[np.abs(z) >= 1e-3]
    ga = rng.uniform(-1, 1, z.shape)
    assert rel_err(nn.relu_backward(z, ga), central_diff(lambda v: ga @ nn.relu_forward(v), z)) < 1e-5


# --- softmax cross-entropy ----------------------------------------------------------

def test_softmax_ce_symmetric():
    loss, p = nn.softmax_cross_entropy([0.0, 0.0], 0)
    np.testing.assert_allclose(p, [0.5, 0.5])
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_softmax_ce_large_logit_is_stable():
    loss, p = nn.softmax_cross_entropy([1000.0, 0.0], 0)
    assert np.all(np.isfinite(p)) and np.isfinite(loss)
    np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)


def test_softmax_ce_matches_direct_formula(rng):
    for _ in range(20):
        z = rng.uniform(-3, 3, 6)
        y = int(rng.integers(0, 6))
        loss, p = nn.softmax_cross_entropy(z, y)
        direct = -math.log(math.exp(z[y]) / sum(math.exp(v) for v in z))
        assert abs(loss - direct) < 1e-12
        assert abs(p.sum() - 1) < 1e-12


def test_softmax_ce_bad_class():
    with pytest.raises(IndexError):
        nn.softmax_cross_entropy([0.0, 1.0], 2)


def test_ce_logit_gradient_cases():
    np.testing.assert_array_equal(nn.ce_logit_gradient([0.5, 0.5], 0), [-0.5, 0.5])
    np.testing.assert_array_equal(nn.ce_logit_gradient([0.0, 1.0, 0.0], 1), [0, 0, 0])
    with pytest.raises(IndexError):
        nn.ce_logit_gradient([0.5, 0.5], -1)


def test_ce_logit_gradient_finite_difference(rng):
    z, y = rng.uniform(-1, 1, 5), 3
    _, p = nn.softmax_cross_entropy(z, y)
    g = nn.ce_logit_gradient(p, y)
    assert abs(g.sum()) < 1e-12
    assert rel_err(g, central_diff(lambda v: nn.softmax_cross_entropy(v, y)[0], z)) < 1e-5


# --- identities and properties -----------------------------------------------------

unit = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_fc_gradient_identities(n, m, data):
    W = data.draw(arrays(np.float64, (n, m), elements=unit))
    x = data.draw(arrays(np.float64, (m,), elements=unit))
    gz = data.draw(arrays(np.float64, (n,), elements=unit))
    z = nn.fc_forward(W, x)
    gW, gx = nn.fc_backward(W, x, gz)
    np.testing.assert_allclose(np.outer(gx, x), W.T @ gW, atol=1e-9)
    np.testing.assert_allclose(np.outer(gz, z), gW @ W.T, atol=1e-9)
    np.testing.assert_allclose(gz * z, np.diag(gW @ W.T), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.data())
def test_conv_frobenius_identity(cout, cin, k, extra, data):
    K = data.draw(arrays(np.float64, (cout, cin, k, k), elements=unit))
    X = data.draw(arrays(np.float64, (cin, k + extra, k + extra), elements=unit))
    Z = nn.conv_forward(K, X)
    gZ = data.draw(arrays(np.float64, Z.shape, elements=unit))
    gK = nn.conv_backward_weights(K, X, gZ)
    for j in range(cout):
        assert abs(nn.frobenius(gK[j], K[j]) - nn.frobenius(gZ[j], Z[j])) < 1e-9
        if extra == 0:
            assert abs(nn.frobenius(gK[j], K[j]) - gZ[j, 0, 0] * Z[j, 0, 0]) < 1e-9


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=unit), st.data())
def test_relu_product_identity(z, data):
    ga = data.draw(arrays(np.float64, z.shape, elements=unit))
    np.testing.assert_allclose(nn.relu_backward(z, ga) * z, ga * nn.relu_forward(z), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50)))
def test_softmax_is_finite_and_normalized(z):
    _, p = nn.softmax_cross_entropy(z, 0)
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12


def test_deterministic_bit_identical(rng):
    K, X = rng.normal(size=(2, 2, 2, 2)), rng.normal(size=(2, 3, 3))
    a = nn.conv_forward(K, X)
    b = nn.conv_forward(K.copy(), X.copy())
    assert a.tobytes() == b.tobytes()
