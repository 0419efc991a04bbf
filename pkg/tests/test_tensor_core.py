import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import CHECKS, check_conv
from oracles import naive_conv2d
from wisdomnet import tensor_core as tc
from wisdomnet.errors import DimensionError, NormalizationError


def _conv_case(rng, shape, k, filters):
    x = rng.standard_normal(shape)
    params = tc.ConvParams(rng.standard_normal((k, k, shape[2], filters)), rng.standard_normal(filters))
    return x, params


# --- convolution -----------------------------------------------------------------

def test_conv_matches_loop_oracle_small_case():
    rng = np.random.default_rng(0)
    x, params = _conv_case(rng, (8, 8, 2), 3, 4)
    out = tc.conv2d_forward(x, params)
    assert out.shape == (8, 8, 4)
    np.testing.assert_allclose(out, naive_conv2d(x, params.kernels, params.bias), rtol=0, atol=1e-6)


@pytest.mark.parametrize("k", [1, 3, 7])
@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 2), (7, 4, 3), (16, 16, 4)])
def test_conv_matches_loop_oracle_sweep(k, shape):
    rng = np.random.default_rng(k * 100 + shape[0])
    x, params = _conv_case(rng, shape, k, 3)
    np.testing.assert_allclose(tc.conv2d_forward(x, params), naive_conv2d(x, params.kernels, params.bias),
                               rtol=0, atol=1e-6)


def test_conv_float32_close_to_oracle():
    rng = np.random.default_rng(1)
    x, params = _conv_case(rng, (9, 9, 3), 7, 2)
    out = tc.conv2d_forward(x.astype(np.float32), tc.ConvParams(params.kernels.astype(np.float32),
                                                                 params.bias.astype(np.float32)))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_conv2d(x, params.kernels, params.bias), atol=1e-4)


def test_conv_preserves_extents_at_full_size():
    x = np.zeros((256, 256, 3), dtype=np.float32)
    params = tc.ConvParams(np.zeros((7, 7, 3, 64), np.float32), np.zeros(64, np.float32))
    assert tc.conv2d_forward(x, params).shape == (256, 256, 64)


def test_conv_identity_kernel_copies_input():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 6, 3))
    params = tc.ConvParams(np.eye(3).reshape(1, 1, 3, 3), np.zeros(3))
    np.testing.assert_array_equal(tc.conv2d_forward(x, params), x)


def test_conv_batch_equals_per_image():
    rng = np.random.default_rng(3)
    xs = rng.standard_normal((3, 6, 6, 2))
    _, params = _conv_case(rng, (6, 6, 2), 3, 4)
    batched = tc.conv2d_forward(xs, params)
    for i in range(3):
        np.testing.assert_allclose(batched[i], tc.conv2d_forward(xs[i], params), atol=1e-12)


def test_conv_channel_mismatch_raises():
    params = tc.ConvParams(np.zeros((3, 3, 2, 4)), np.zeros(4))
    with pytest.raises(DimensionError):
        tc.conv2d_forward(np.zeros((5, 5, 3)), params)


@pytest.mark.parametrize("shape", [(2, 2, 1, 1), (3, 3, 1)])
def test_conv_params_reject_bad_kernels(shape):
    with pytest.raises(DimensionError):
        tc.ConvParams(np.zeros(shape), np.zeros(1))


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(4)
    x, params = _conv_case(rng, (6, 6, 2), 3, 3)
    for g in tc.conv2d_backward(x, params, np.zeros((6, 6, 3))):
        assert not np.any(g)


def test_conv_backward_single_pixel_identity():
    params = tc.ConvParams(np.eye(2).reshape(1, 1, 2, 2), np.zeros(2))
    up = np.zeros((4, 4, 2))
    up[1, 2, 0] = 3.0
    gx, _, _ = tc.conv2d_backward(np.ones((4, 4, 2)), params, up)
    np.testing.assert_array_equal(gx, up)


def test_conv_backward_shape_mismatch():
    params = tc.ConvParams(np.zeros((3, 3, 2, 4)), np.zeros(4))
    with pytest.raises(DimensionError):
        tc.conv2d_backward(np.zeros((5, 5, 2)), params, np.zeros((5, 5, 3)))


def test_conv_backward_finite_differences_k7():
    with tc.precision(np.float64):
        assert check_conv(11, shape=(5, 5, 2), k=7, filters=2) < 1e-4


# --- gradient checks --------------------------------------------------------------

@pytest.mark.parametrize("op", sorted(CHECKS))
def test_backward_matches_finite_differences(op):
    with tc.precision(np.float64):
        worst = max(CHECKS[op](seed) for seed in range(50))
    assert worst < 1e-4, f"{op}: {worst:.3e}"


# --- pooling -------------------------------------------------------------------------

def test_maxpool_simple_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    out, index = tc.maxpool2d_forward(x)
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4
    assert tuple(index.positions()[0, 0, 0]) == (1, 1)
    grad = tc.maxpool2d_backward(index, np.ones((1, 1, 1)))
    np.testing.assert_array_equal(grad[:, :, 0], [[0, 0], [0, 1]])


def test_maxpool_constant_input_picks_first_cell():
    out, index = tc.maxpool2d_forward(np.full((4, 6, 2), 7.0))
    assert np.all(out == 7)
    assert np.all(index.indices == 0)
    pos = index.positions()
    assert np.all(pos[..., 0] % 2 == 0) and np.all(pos[..., 1] % 2 == 0)


def test_maxpool_shapes_and_floor():
    out, _ = tc.maxpool2d_forward(np.zeros((256, 256, 64), np.float32))
    assert out.shape == (128, 128, 64)
    out, index = tc.maxpool2d_forward(np.arange(5 * 7, dtype=float).reshape(5, 7, 1))
    assert out.shape == (2, 3, 1)
    grad = tc.maxpool2d_backward(index, np.ones(out.shape))
    assert grad.shape == (5, 7, 1)
    assert not grad[4].any() and not grad[:, 6].any()


def test_maxpool_backward_routes_to_argmax_only():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 8, 3))
    out, index = tc.maxpool2d_forward(x)
    up = rng.standard_normal(out.shape)
    grad = tc.maxpool2d_backward(index, up)
    assert np.count_nonzero(grad) == up.size
    pos = index.positions()
    for i in range(4):
        for j in range(4):
            for c in range(3):
                y, xx = pos[i, j, c]
                assert grad[y, xx, c] == up[i, j, c]
                assert x[y, xx, c] == out[i, j, c]


def test_maxpool_zero_upstream_and_errors():
    _, index = tc.maxpool2d_forward(np.ones((4, 4, 1)))
    assert not tc.maxpool2d_backward(index, np.zeros((2, 2, 1))).any()
    with pytest.raises(DimensionError):
        tc.maxpool2d_backward(index, np.zeros((3, 2, 1)))
    with pytest.raises(DimensionError):
        tc.maxpool2d_forward(np.ones((1, 4, 1)))


# --- dense ------------------------------------------------------------------------------

def test_dense_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(tc.dense_forward(x, np.eye(3), np.zeros(3)), x)
    b = np.array([0.5, 1.5])
    np.testing.assert_array_equal(tc.dense_forward(np.zeros(3), np.ones((3, 2)), b), b)


def test_dense_matches_dot_products():
    rng = np.random.default_rng(6)
    x, w, b = rng.standard_normal(5), rng.standard_normal((5, 3)), rng.standard_normal(3)
    expected = [math.fsum(x[i] * w[i, j] for i in range(5)) + b[j] for j in range(3)]
    np.testing.assert_allclose(tc.dense_forward(x, w, b), expected, atol=1e-6)


def test_dense_backward_structure():
    rng = np.random.default_rng(7)
    x, w = rng.standard_normal(5), rng.standard_normal((5, 3))
    up = rng.standard_normal(3)
    gx, gw, gb = tc.dense_backward(x, w, up)
    np.testing.assert_allclose(gw, np.outer(x, up))
    np.testing.assert_allclose(gb, up)
    np.testing.assert_allclose(gx, w @ up)
    assert np.linalg.matrix_rank(gw) == 1
    for g in tc.dense_backward(x, w, np.zeros(3)):
        assert not np.any(g)


def test_dense_dimension_errors():
    with pytest.raises(DimensionError):
        tc.dense_forward(np.zeros(4), np.zeros((5, 3)), np.zeros(3))
    with pytest.raises(DimensionError):
        tc.dense_forward(np.zeros(5), np.zeros((5, 3)), np.zeros(2))
    with pytest.raises(DimensionError):
        tc.dense_backward(np.zeros(5), np.zeros((5, 3)), np.zeros(2))


# --- relu / softmax / loss ---------------------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(tc.relu(np.array([-1.0, 2.0])), [0, 2])
    assert not tc.relu(-np.ones(4)).any()
    np.testing.assert_array_equal(tc.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


def test_softmax_examples():
    np.testing.assert_allclose(tc.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    with np.errstate(over="raise", invalid="raise"):
        p = tc.softmax(np.array([1000.0, 0.0]))
    assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 4)),
              elements=st.floats(-1e4, 1e4)))
def test_softmax_normalized_for_large_magnitudes(z):
    p = tc.softmax(z)
    assert np.all(p >= 0) and np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        tc.softmax(np.array([np.nan, 0.0]))


def test_loss_examples():
    half = np.full((2, 2), 0.5)
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    # both rows: -log(0.5)
    assert tc.cross_entropy_loss(y, half) == pytest.approx(0.6931, abs=1e-4)
    assert tc.cross_entropy_loss(np.array([[1.0, 0.0]]), half[:1]) == pytest.approx(math.log(2))
    perfect = tc.cross_entropy_loss(np.array([[0.0, 1.0]]), np.array([[1e-7, 1 - 1e-7]]))
    assert 0 <= perfect < 1e-6
    assert tc.binary_cross_entropy([1], [0.5]) == pytest.approx(0.6931, abs=1e-4)
    assert tc.binary_cross_entropy([1], [1 - 1e-7]) == pytest.approx(0.0, abs=1e-6)


def test_loss_clamps_saturated_predictions():
    loss = tc.cross_entropy_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(-math.log(1e-7))


def test_loss_rejects_unnormalized_rows():
    with pytest.raises(NormalizationError):
        tc.cross_entropy_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.6]]))
    with pytest.raises(DimensionError):
        tc.cross_entropy_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
def test_loss_is_non_negative(rows):
    y = np.eye(2)[[r[0] for r in rows]]
    p1 = np.array([r[1] for r in rows])
    assert tc.cross_entropy_loss(y, np.stack([1 - p1, p1], axis=1)) >= 0


# --- purity and precision ---------------------------------------------------------------

def test_forward_ops_are_pure():
    rng = np.random.default_rng(8)
    x, params = _conv_case(rng, (6, 6, 2), 3, 2)
    x_copy = x.copy()
    a = tc.conv2d_forward(x, params)
    b = tc.conv2d_forward(x, params)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(x, x_copy)
    p1, i1 = tc.maxpool2d_forward(x)
    p2, i2 = tc.maxpool2d_forward(x)
    assert p1.tobytes() == p2.tobytes() and np.array_equal(i1.indices, i2.indices)
    assert tc.softmax(x).tobytes() == tc.softmax(x).tobytes()


def test_precision_context_restores_dtype():
    assert tc.get_default_dtype() == np.float32
    with tc.precision(np.float64):
        assert tc.get_default_dtype() == np.float64
        assert tc.Tensor([1, 2]).dtype == np.float64
    assert tc.get_default_dtype() == np.float32
    assert tc.Tensor([1, 2]).dtype == np.float32


def test_tensor_gradient_accumulates():
    t = tc.Tensor(np.zeros((2, 2)))
    t.accumulate(np.ones((2, 2)))
    t.accumulate(np.ones((2, 2)))
    np.testing.assert_array_equal(t.grad, 2 * np.ones((2, 2)))
    t.zero_grad()
    assert not t.grad.any()
    with pytest.raises(DimensionError):
        t.accumulate(np.ones(3))
