import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import weighted_sum
from roicodec.gradcheck import check_gradients
from roicodec.tensor import (
    DimensionError,
    Tensor,
    avg_pool2d,
    concat,
    conv2d,
    conv_transpose2d,
    default_dtype,
    get_default_dtype,
    layer_norm,
    matmul,
    no_grad,
    round_half_away,
    softmax,
    upsample_nearest,
)

TOL = 1e-4


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, dtype=np.float64)


# -- conv2d ------------------------------------------------------------------------


def test_conv2d_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


def test_conv2d_strided_shape():
    out = conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((16, 3, 5, 5))), stride=2, pad=2)
    assert out.shape == (1, 16, 4, 4)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_zero_kernel_gives_bias():
    b = np.array([0.25, -1.5])
    out = conv2d(Tensor(np.random.rand(2, 3, 5, 5)), Tensor(np.zeros((2, 3, 3, 3))), Tensor(b), pad=1)
    np.testing.assert_array_equal(out.data, np.broadcast_to(b[None, :, None, None], out.shape))


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, k) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 2)])
def test_conv2d_gradients(rng, stride, pad):
    x, k, b = param(rng, 2, 3, 6, 6), param(rng, 4, 3, 3, 3), param(rng, 4)
    errs = check_gradients(lambda: weighted_sum(conv2d(x, k, b, stride, pad)), [x, k, b])
    assert max(errs) < TOL


def test_conv2d_sum_gradient_wrt_input(rng):
    x, k = param(rng, 1, 2, 5, 5), param(rng, 3, 2, 3, 3)
    assert check_gradients(lambda: conv2d(x, k).sum(), [x])[0] < TOL


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.normal(size=(1, 3, 4, 4))
    k = rng.normal(size=(3, 2, 5, 5))  # [C_in, C_out, k, k]
    y = conv_transpose2d(Tensor(x), Tensor(k), stride=2, pad=2, output_pad=1).data
    assert y.shape == (1, 2, 8, 8)
    u = rng.normal(size=y.shape)
    # <T x, u> == <x, conv(u)> with the same kernel read as [O=C_in, C=C_out]
    lhs = float((y * u).sum())
    rhs = float((x * conv2d(Tensor(u), Tensor(k), stride=2, pad=2).data).sum())
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_conv_transpose_gradients(rng):
    x, k, b = param(rng, 1, 3, 3, 3), param(rng, 3, 2, 5, 5), param(rng, 2)
    errs = check_gradients(lambda: weighted_sum(conv_transpose2d(x, k, b, 2, 2, 1)), [x, k, b])
    assert max(errs) < TOL


# -- pooling / upsampling -------------------------------------------------------------


def test_avg_pool_examples():
    np.testing.assert_array_equal(avg_pool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]])), 2).data, [[[[2.5]]]])
    assert avg_pool2d(Tensor(np.array([[[[1.0, 1], [0, 0]]]])), 2).data.item() == 0.5
    c = avg_pool2d(Tensor(np.full((1, 2, 4, 4), 0.3)), 2).data
    np.testing.assert_allclose(c, 0.3, rtol=1e-15)


def test_avg_pool_indivisible():
    with pytest.raises(DimensionError):
        avg_pool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_avg_pool_preserves_mean(rng):
    x = rng.random((2, 3, 8, 16))
    assert abs(avg_pool2d(Tensor(x), 4).data.mean() - x.mean()) < 1e-6


def test_pool_upsample_gradients(rng):
    x = param(rng, 1, 2, 4, 4)
    assert check_gradients(lambda: weighted_sum(avg_pool2d(x, 2)), [x])[0] < TOL
    assert check_gradients(lambda: weighted_sum(upsample_nearest(x, 3)), [x])[0] < TOL


# -- layer norm / softmax / matmul -----------------------------------------------------------------


def test_layer_norm_example():
    out = layer_norm(Tensor(np.array([1.0, 2, 3])), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.2247449, 0.0, 1.2247449], atol=1e-6)


def test_layer_norm_constant_vector():
    out = layer_norm(Tensor(np.full(5, 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_gradients(rng):
    x, g, b = param(rng, 3, 4, 6), param(rng, 6), param(rng, 6)
    assert max(check_gradients(lambda: weighted_sum(layer_norm(x, g, b)), [x, g, b])) < TOL


def test_softmax_examples():
    np.testing.assert_array_equal(softmax(Tensor(np.array([0.0, 0.0]))).data, [0.5, 0.5])
    out = softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=np.finfo(np.float64).eps)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_normalized(x):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_with_neg_inf_entries():
    out = softmax(Tensor(np.array([[0.0, -np.inf, 1.0]]))).data
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0)


def test_softmax_gradients(rng):
    x = param(rng, 2, 3, 5)
    assert check_gradients(lambda: weighted_sum(softmax(x, axis=-1)), [x])[0] < TOL


def test_matmul_examples(rng):
    a = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.eye(4))).data, a)
    out = matmul(Tensor(np.array([[1.0, 2], [3, 4]])), Tensor(np.array([[1.0], [1]])))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_inner_mismatch():
    with pytest.raises((DimensionError, ValueError)):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_gradients_batched(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    assert max(check_gradients(lambda: weighted_sum(matmul(a, b)), [a, b])) < TOL


# -- elementwise and structural ops ----------------------------------------------------------


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: t.exp(),
        lambda t: (t * t + 1.0).log(),
        lambda t: (t * t + 0.5).sqrt(),
        lambda t: t.tanh(),
        lambda t: t.sigmoid(),
        lambda t: t.softplus(),
        lambda t: t.gelu(),
        lambda t: t.normal_cdf(),
        lambda t: (t * t + 0.1) ** 1.5,
        lambda t: t / (t * t + 1.0),
        lambda t: 2.0 - t * 3.0,
        lambda t: t.transpose(2, 0, 1).reshape(4, -1),
        lambda t: t[:, 1:, ::2],
        lambda t: t[np.array([0, 1, 1]), :, 0],
        lambda t: t.roll((1, -2), (1, 2)),
        lambda t: t.pad(((0, 0), (1, 2), (2, 1))),
        lambda t: t.pad(((0, 0), (1, 2), (2, 1)), mode="edge"),
        lambda t: concat([t, t * 2.0], axis=1),
        lambda t: t.mean(axis=1, keepdims=True) * t,
        lambda t: t.abs() + t.relu(),
    ],
)
def test_elementwise_gradients(rng, fn):
    x = param(rng, 2, 3, 4)
    # keep away from kinks of abs/relu
    x.data[np.abs(x.data) < 1e-2] += 0.1
    assert check_gradients(lambda: weighted_sum(fn(x)), [x])[0] < TOL


def test_broadcast_gradient_unbroadcasts(rng):
    x, b = param(rng, 2, 3, 4), param(rng, 4)
    errs = check_gradients(lambda: weighted_sum(x * b + b), [x, b])
    assert max(errs) < TOL
    assert b.grad.shape == b.shape


def test_round_ste_passes_gradient():
    x = Tensor(np.array([0.2, 1.7, -2.5]), requires_grad=True)
    y = x.round_ste()
    np.testing.assert_array_equal(y.data, [0.0, 2.0, -3.0])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -2.5, 0.49])), [1, 2, 3, -1, -3, 0])


# -- backward semantics -------------------------------------------------------------------------


def test_backward_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_backward_linear_bias_grad(rng):
    f, g, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=3), requires_grad=True), Tensor(rng.normal(size=3), requires_grad=True)
    (g * f + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(3, 2.0))  # broadcast over 2 rows


def test_backward_accumulates():
    x = Tensor(np.array(2.0), requires_grad=True)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == 8.0


def test_backward_nonscalar_is_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_shared_subexpression():
    x = Tensor(np.array(1.5), requires_grad=True)
    y = x * x
    (y + y * x).backward()  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad == pytest.approx(2 * 1.5 + 3 * 1.5**2)


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_dtype_context():
    assert get_default_dtype() == np.float32
    with default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_forward_ops_stay_finite():
    x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    for t in (x.exp(), x.sigmoid(), x.softplus(), x.tanh(), x.gelu(), x.normal_cdf()):
        assert np.all(np.isfinite(t.data))
