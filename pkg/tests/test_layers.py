import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases as G
from complab import layers as L
from complab.gradcheck import grad_check, numerical_grad


# ---------------------------------------------------------------- convolution

def test_conv_scalar_case():
    x = np.full((1, 1, 1, 1), 3.0)
    k = np.full((1, 1, 1, 1), -2.0)
    assert L.conv2d_forward(x, k).item() == -6.0
    g = L.conv2d_backward(x, k, 1, "same", np.ones((1, 1, 1, 1)))
    assert g.d_input.item() == -2.0
    assert g.d_params[0].item() == 3.0


def test_conv_all_ones_valid():
    x = np.ones((1, 3, 3, 1))
    k = np.ones((3, 3, 1, 1))
    y = L.conv2d_forward(x, k, 1, "valid")
    assert y.shape == (1, 1, 1, 1) and y.item() == 9.0
    g = L.conv2d_backward(x, k, 1, "valid", np.ones_like(y))
    np.testing.assert_array_equal(g.d_params[0][..., 0, 0], x[0, ..., 0])


@pytest.mark.parametrize("n,k,s,pad,expected", [
    (28, 3, 2, "same", 14), (28, 3, 1, "same", 28), (7, 3, 2, "same", 4), (7, 3, 2, "same_floor", 3),
    (28, 3, 1, "valid", 26), (7, 3, 2, "valid", 3), (14, 1, 2, "same_floor", 7),
])
def test_conv_output_size(n, k, s, pad, expected):
    assert L.conv_output_size(n, k, s, pad) == expected


def test_conv_stride2_same_shape():
    x = np.zeros((1, 28, 28, 64), np.float32)
    k = np.zeros((3, 3, 64, 64), np.float32)
    assert L.conv2d_forward(x, k, 2, "same").shape == (1, 14, 14, 64)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6, 3))
    k = rng.standard_normal((3, 3, 3, 4))
    y = L.conv2d_forward(x, k, 1, "same")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(y)
    for i in range(5):
        for j in range(6):
            ref[:, i, j] = np.einsum("nabc,abco->no", xp[:, i:i + 3, j:j + 3], k)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv_shape_errors():
    x = np.zeros((1, 4, 4, 2))
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(x, np.zeros((3, 3, 3, 1)))
    with pytest.raises(L.ShapeError):
        L.conv2d_backward(x, np.zeros((3, 3, 2, 1)), 1, "same", np.zeros((1, 3, 3, 1)))


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31), stride=st.sampled_from([1, 2]))
def test_conv_is_linear(a, b, seed, stride):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 6, 6, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    lhs = L.conv2d_forward(a * x + b * y, k, stride)
    rhs = a * L.conv2d_forward(x, k, stride) + b * L.conv2d_forward(y, k, stride)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# ------------------------------------------------------------------ separable

def _rank1(row, col):
    # row (n,1,ci,co), col (1,n,ci,co) -> (n,n,ci,co)
    return row * col


def test_separable_n1_is_pointwise_conv():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 5, 5, 2))
    col, row = rng.standard_normal((1, 1, 2, 3)), rng.standard_normal((1, 1, 2, 3))
    np.testing.assert_allclose(L.conv2d_separable(x, col, row), L.conv2d_forward(x, row * col), atol=1e-12)


def test_separable_all_ones():
    x = np.random.default_rng(2).standard_normal((1, 6, 6, 1))
    out = L.conv2d_separable(x, np.ones((1, 3, 1, 1)), np.ones((3, 1, 1, 1)))
    np.testing.assert_allclose(out, L.conv2d_forward(x, np.ones((3, 3, 1, 1))), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.sampled_from([1, 3, 5]), pad=st.sampled_from(["same", "valid"]))
def test_separable_matches_rank1_kernel(seed, n, pad):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 12, 12, 2))
    col, row = rng.standard_normal((1, n, 2, 3)), rng.standard_normal((n, 1, 2, 3))
    full = L.conv2d_forward(x, _rank1(row, col), 1, pad)
    assert np.abs(L.conv2d_separable(x, col, row, 1, pad) - full).max() < 1e-10


def test_separable_errors():
    x = np.zeros((1, 5, 5, 1))
    with pytest.raises(L.ShapeError):
        L.conv2d_separable(x, np.ones((1, 3, 1, 1)), np.ones((5, 1, 1, 1)))
    with pytest.raises(L.ShapeError):
        L.conv2d_separable(x, np.ones((1, 3, 1, 1)), np.ones((3, 1, 1, 1)), stride=2)


# -------------------------------------------------------------------- pooling

def test_maxpool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    y, idx = L.maxpool2d(x)
    assert y.item() == 4.0
    d = L.maxpool2d_backward(idx, np.ones_like(y))
    np.testing.assert_array_equal(d[0, :, :, 0], [[0, 0], [0, 1]])


def test_maxpool_constant_and_tie_break():
    x = np.full((1, 4, 4, 1), 7.0)
    y, idx = L.maxpool2d(x)
    assert np.all(y == 7.0)
    d = L.maxpool2d_backward(idx, np.ones_like(y))
    np.testing.assert_array_equal(d[0, :2, :2, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("n,out", [(28, 14), (14, 7), (7, 3)])
def test_maxpool_shapes(n, out):
    assert L.maxpool2d(np.zeros((1, n, n, 2)))[0].shape == (1, out, out, 2)


def test_maxpool_too_small():
    with pytest.raises(L.ShapeError):
        L.maxpool2d(np.zeros((1, 1, 4, 1)))


# ----------------------------------------------------------------- batch norm

def test_batchnorm_train_statistics():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 4, 4, 3)) * 5 + 2
    st_ = L.BatchNormState.create(3, np.float64)
    y, _ = L.batchnorm_forward(x, st_, "train")
    assert np.abs(y.mean(axis=(0, 1, 2))).max() < 1e-6
    assert np.abs(y.var(axis=(0, 1, 2)) - 1).max() < 1e-5


def test_batchnorm_gamma_beta_statistics():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((32, 3, 3, 2))
    gamma, beta = np.array([2.0, 0.5]), np.array([-1.0, 3.0])
    st_ = L.BatchNormState(gamma, beta, np.zeros(2), np.ones(2), epsilon=1e-12)
    y, _ = L.batchnorm_forward(x, st_, "train")
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), beta, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), gamma ** 2, atol=1e-6)


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((4, 2, 2, 1), 5.0)
    st_ = L.BatchNormState(np.ones(1), np.full(1, 0.25), np.zeros(1), np.ones(1))
    y, _ = L.batchnorm_forward(x, st_, "train")
    np.testing.assert_allclose(y, 0.25)


def test_batchnorm_eval_identity_with_default_stats():
    x = np.random.default_rng(5).standard_normal((3, 2, 2, 2))
    st_ = L.BatchNormState.create(2, np.float64, epsilon=1e-12)
    y, _ = L.batchnorm_forward(x, st_, "eval")
    np.testing.assert_allclose(y, x, atol=1e-9)


def test_batchnorm_running_stats_momentum():
    x = np.random.default_rng(6).standard_normal((8, 2, 2, 1)) + 4
    st_ = L.BatchNormState.create(1, np.float64)
    L.batchnorm_forward(x, st_, "train")
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(), rtol=1e-12)
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(ddof=1), rtol=1e-12)


def test_batchnorm_batch_of_one_rejected():
    with pytest.raises(ValueError):
        L.batchnorm_forward(np.zeros((1, 2, 2, 1)), L.BatchNormState.create(1), "train")


def test_batchnorm_param_grads_simple():
    x = np.random.default_rng(7).standard_normal((4, 2, 2, 1))
    st_ = L.BatchNormState.create(1, np.float64)
    y, cache = L.batchnorm_forward(x, st_, "train")
    dy = np.random.default_rng(8).standard_normal(y.shape)
    g = L.batchnorm_backward(cache, st_, dy)
    assert g.d_params[1].item() == pytest.approx(dy.sum())
    assert g.d_params[0].item() == pytest.approx((dy * cache.x_hat).sum())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_batchnorm_eval_is_affine(seed):
    rng = np.random.default_rng(seed)
    st_ = L.BatchNormState(rng.uniform(0.5, 2, 2), rng.standard_normal(2), rng.standard_normal(2),
                           rng.uniform(0.5, 2, 2))
    x, z = rng.standard_normal((2, 3, 2, 2, 2))
    f = lambda v: L.batchnorm_forward(v, st_, "eval")[0]  # noqa: E731
    np.testing.assert_allclose(f(0.5 * x + 0.5 * z), 0.5 * f(x) + 0.5 * f(z), atol=1e-12)
    np.testing.assert_array_equal(f(x), f(x))


# ------------------------------------------------------------ pointwise, loss

def test_relu_values():
    np.testing.assert_array_equal(L.relu(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_dropout_identity_cases():
    x = np.arange(6.0)
    assert L.dropout(x, 0.0, np.random.default_rng(0))[0] is x
    assert L.dropout(x, 0.9, None, "eval")[0] is x
    with pytest.raises(ValueError):
        L.dropout(x, 1.0, np.random.default_rng(0))


def test_dropout_statistics():
    x = np.ones(100_000)
    y, _ = L.dropout(x, 0.5, np.random.default_rng(123))
    assert abs((y == 0).mean() - 0.5) < 0.01
    assert abs(y.mean() - 1.0) < 0.02


def test_softmax_ce_examples():
    loss, d = L.softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    np.testing.assert_allclose(L.softmax(np.random.default_rng(0).standard_normal((5, 10))).sum(1), 1, atol=1e-9)
    logits = np.zeros((1, 10))
    logits[0, 3] = 1e4
    assert L.softmax_cross_entropy(logits, np.array([3]))[0] < 1e-12
    with pytest.raises(ValueError):
        L.softmax_cross_entropy(np.zeros((1, 10)), np.array([10]))


def test_softmax_ce_gradient_formula():
    z = np.random.default_rng(9).standard_normal((4, 10))
    y = np.array([1, 2, 3, 4])
    _, d = L.softmax_cross_entropy(z, y)
    onehot = np.eye(10)[y]
    np.testing.assert_allclose(d, (L.softmax(z) - onehot) / 4, atol=1e-15)


def test_he_normal_scale():
    k = L.he_normal((3, 3, 64, 256), np.random.default_rng(0), np.float64)
    assert k.std() == pytest.approx(math.sqrt(2 / (9 * 64)), rel=0.02)


# ------------------------------------------------------------ gradient checks

def test_gradcheck_detects_wrong_gradient():
    x = np.random.default_rng(0).standard_normal(5)
    rep = grad_check(lambda x: float((x ** 2).sum()), [x], [3 * x])
    assert not rep.passed


def test_numerical_grad_quadratic():
    x = np.array([1.0, -2.0])
    np.testing.assert_allclose(numerical_grad(lambda x: float((x ** 3).sum()), [x])[0], 3 * x ** 2, rtol=1e-8)


@pytest.mark.parametrize("name", list(G.CASES))
def test_op_gradients(name):
    case = G.CASES[name]
    for i in range(G.INSTANCES):
        f, inputs, analytic, mask = case(np.random.default_rng([11, i]))
        rep = grad_check(f, inputs, analytic, h=G.H, tolerance=1e-4, mask=mask)
        assert rep.passed, f"{name} instance {i}: {rep.max_rel_error:.3g}"


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 8, 8, 3)).astype(np.float32)
    k = rng.standard_normal((3, 3, 3, 8)).astype(np.float32)
    a = L.conv2d_forward(x, k, 2)
    b = L.conv2d_forward(x, k, 2)
    assert a.tobytes() == b.tobytes()
