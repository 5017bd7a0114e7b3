"""Unit and property tests for the tensor/autodiff core.

Every differentiable operation is checked against central finite
differences in float64; fixed examples are hand-derived.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdspix import autodiff as ad
from cdspix.autodiff import Tensor


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr), requires_grad=requires_grad, dtype=np.float64)


# -- conv2d -----------------------------------------------------------------------


def test_conv_identity_kernel():
    x = t64(np.random.default_rng(0).random((1, 4, 4)))
    w = t64(np.ones((1, 1, 1, 1)))
    b = t64(np.zeros(1))
    out = ad.conv2d(x, w, b)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_all_ones_3x3():
    x = t64(np.ones((1, 3, 3)))
    w = t64(np.ones((1, 1, 3, 3)))
    b = t64(np.zeros(1))
    out = ad.conv2d(x, w, b, pad=0)
    assert out.shape == (1, 1, 1)
    assert out.item() == pytest.approx(9.0, abs=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1), (3, 0)])
def test_conv_gradients_match_finite_differences(rng, stride, pad):
    k = 3
    h = k
    while (h + 2 * pad - k) % stride:
        h += 1
    h = max(h, 5 if (5 + 2 * pad - k) % stride == 0 else h)
    x = t64(rng.random((2, h, h)), requires_grad=True)
    w = t64(rng.standard_normal((3, 2, k, k)), requires_grad=True)
    b = t64(rng.standard_normal(3), requires_grad=True)

    def f_x(t):
        return ad.tsum(ad.sigmoid(ad.conv2d(t, w, b, stride=stride, pad=pad)))

    assert ad.grad_check(f_x, x, 1e-5) < 1e-4
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.conv2d(x, t, b, stride=stride, pad=pad))), w, 1e-5) < 1e-4
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.conv2d(x, w, t, stride=stride, pad=pad))), b, 1e-5) < 1e-4


def test_conv_shape_errors():
    x = t64(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d(x, t64(np.zeros((1, 3, 3, 3))), t64(np.zeros(1)))
    with pytest.raises(ValueError, match="odd"):
        ad.conv2d(x, t64(np.zeros((1, 2, 2, 2))), t64(np.zeros(1)))
    with pytest.raises(ValueError, match="non-integral"):
        ad.conv2d(x, t64(np.zeros((1, 2, 3, 3))), t64(np.zeros(1)), stride=3)


# -- linear -----------------------------------------------------------------------


def test_linear_identity():
    x = t64([[1.0, 2.0], [3.0, 4.0]])
    out = ad.linear(x, t64(np.eye(2)), t64(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x.data)


def test_linear_dot_product():
    out = ad.linear(t64([2.0, 3.0]), t64([[1.0, 1.0]]), t64([0.0]))
    assert out.data == pytest.approx([5.0])


def test_linear_gradients(rng):
    x = t64(rng.random((4, 3)), requires_grad=True)
    w = t64(rng.standard_normal((2, 3)), requires_grad=True)
    b = t64(rng.standard_normal(2), requires_grad=True)
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.linear(t, w, b))), x, 1e-5) < 1e-4
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.linear(x, t, b))), w, 1e-5) < 1e-4
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.linear(x, w, t))), b, 1e-5) < 1e-4


def test_linear_dimension_mismatch():
    with pytest.raises(ValueError, match="trailing dim"):
        ad.linear(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))))


# -- activations ------------------------------------------------------------------


def test_activation_definitions():
    assert ad.sigmoid(t64([0.0])).item() == pytest.approx(0.5)
    assert ad.relu(t64([-1.0])).item() == 0.0
    a = t64(np.arange(3.0))
    assert np.abs((a + (-a)).data).max() == 0.0


def test_sigmoid_derivative_at_zero():
    x = t64([0.0], requires_grad=True)
    out = ad.tsum(ad.sigmoid(x))
    out.backward()
    assert x.grad[0] == pytest.approx(0.25, abs=1e-12)


def test_sigmoid_extreme_inputs_stable():
    out = ad.sigmoid(t64([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(0.0, abs=1e-12)
    assert out.data[1] == pytest.approx(1.0, abs=1e-12)


def test_log_eps_guard():
    out = ad.log(t64([0.0]))
    assert np.isfinite(out.item())
    assert out.item() == pytest.approx(np.log(1e-8))


# -- pooling ----------------------------------------------------------------------


def test_pooling_constants(rng):
    x = Tensor(np.full((3, 4, 4), 2.5))
    np.testing.assert_allclose(ad.spatial_mean(x).data, 2.5)
    np.testing.assert_allclose(ad.channel_mean(x).data, 2.5)
    np.testing.assert_allclose(ad.avgpool2d(x, 2).data, 2.5)


def test_channel_mean_pair():
    x = t64(np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)]))
    np.testing.assert_allclose(ad.channel_mean(x).data, 1.0)


def test_spatial_mean_gradient_even_redistribution():
    x = t64(np.random.default_rng(0).random((2, 3, 5)), requires_grad=True)
    ad.tsum(ad.spatial_mean(x)).backward()
    np.testing.assert_allclose(x.grad, 1.0 / 15.0)


def test_avgpool_window_error():
    with pytest.raises(ValueError, match="divide"):
        ad.avgpool2d(t64(np.zeros((1, 5, 5))), 2)


def test_pool_resize_upsample_gradients(rng):
    x = t64(rng.random((2, 4, 6)), requires_grad=True)
    for f in (
        lambda t: ad.tsum(ad.sigmoid(ad.avgpool2d(t, 2))),
        lambda t: ad.tsum(ad.sigmoid(ad.block_sum(t, 2))),
        lambda t: ad.tsum(ad.sigmoid(ad.nearest_upsample(t, 2))),
        lambda t: ad.tsum(ad.sigmoid(ad.shift2d(t, 1, -1))),
        lambda t: ad.tsum(ad.sigmoid(ad.spatial_mean(t))),
        lambda t: ad.tsum(ad.sigmoid(ad.channel_mean(t))),
    ):
        assert ad.grad_check(f, x, 1e-5) < 1e-4


# -- bilinear resize ---------------------------------------------------------------


def test_bilinear_constant_any_size():
    x = Tensor(np.full((2, 3, 5), 0.7))
    for h2, w2 in [(1, 1), (3, 5), (7, 11), (2, 9)]:
        out = ad.bilinear_resize(x, h2, w2)
        np.testing.assert_allclose(out.data, 0.7, rtol=1e-6)


def test_bilinear_corner_aligned_row():
    out = ad.bilinear_resize(t64([[[0.0, 2.0]]]), 1, 3)
    np.testing.assert_allclose(out.data, [[[0.0, 1.0, 2.0]]], atol=1e-12)


def test_bilinear_gradient(rng):
    x = t64(rng.random((2, 6, 7)), requires_grad=True)
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.bilinear_resize(t, 3, 4))), x, 1e-5) < 1e-4


def test_bilinear_zero_target_error():
    with pytest.raises(ValueError, match=">= 1"):
        ad.bilinear_resize(t64(np.zeros((1, 4, 4))), 0, 4)


# -- softmax ----------------------------------------------------------------------


def test_softmax_uniform():
    out = ad.softmax(t64(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.2, atol=1e-12)


def test_softmax_hand_value():
    out = ad.softmax(t64([0.0, np.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.floats(-20, 20))
def test_softmax_shift_invariance_and_normalization(values, shift):
    x = np.asarray(values)
    a = ad.softmax(t64(x)).data
    b = ad.softmax(t64(x + shift)).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert abs(a.sum() - 1.0) < 1e-6
    assert (a > 0).all()


def test_softmax_masked_zeros_and_gradient(rng):
    mask = np.array([True, False, True, True])
    x = t64(rng.standard_normal(4), requires_grad=True)
    out = ad.softmax(x, mask=mask)
    assert out.data[1] == 0.0
    assert out.data.sum() == pytest.approx(1.0, abs=1e-12)
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.softmax(t, mask=mask))), x, 1e-5) < 1e-4


def test_softmax_gradient(rng):
    x = t64(rng.standard_normal((3, 5)), requires_grad=True)
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.softmax(t, axis=1))), x, 1e-5) < 1e-4


# -- backward contract --------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(0).random((3, 4)), requires_grad=True)
    ad.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_chain_matches_analytic():
    # d/dx sum(sigmoid(Wx)) = W^T sigma'(Wx)
    rng = np.random.default_rng(3)
    wv = rng.standard_normal((3, 2))
    xv = rng.standard_normal(2)
    x = t64(xv, requires_grad=True)
    w = t64(wv)
    ad.tsum(ad.sigmoid(ad.linear(x, w))).backward()
    s = 1 / (1 + np.exp(-(wv @ xv)))
    np.testing.assert_allclose(x.grad, wv.T @ (s * (1 - s)), atol=1e-12)


def test_backward_twice_raises():
    x = t64([1.0, 2.0], requires_grad=True)
    loss = ad.tsum(x * x)
    loss.backward()
    with pytest.raises(RuntimeError, match="already"):
        loss.backward()


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


def test_gradients_accumulate_across_passes():
    x = t64([1.0], requires_grad=True)
    ad.tsum(x * 2.0).backward()
    ad.tsum(x * 3.0).backward()
    assert x.grad[0] == pytest.approx(5.0)
    x.zero_grad()
    ad.tsum(x * 3.0).backward()
    assert x.grad[0] == pytest.approx(3.0)


def test_forward_determinism(rng):
    x = Tensor(rng.random((2, 8, 8)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32))
    b = Tensor(rng.standard_normal(4).astype(np.float32))
    a = ad.softmax(ad.conv2d(x, w, b, pad=1), axis=0).data
    bb = ad.softmax(ad.conv2d(x, w, b, pad=1), axis=0).data
    np.testing.assert_array_equal(a, bb)


def test_detach_cuts_graph():
    x = t64([1.0, 2.0], requires_grad=True)
    y = (x * 3.0).detach()
    assert y._parents == ()
    ad.tsum(y * 2.0).backward()
    assert x.grad is None


def test_no_grad_blocks_recording():
    x = t64([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert y._parents == ()


# -- shape/structure ops -------------------------------------------------------------


def test_structure_op_gradients(rng):
    x = t64(rng.random((2, 3, 4)), requires_grad=True)
    checks = [
        lambda t: ad.tsum(ad.sigmoid(ad.reshape(t, (6, 4)))),
        lambda t: ad.tsum(ad.sigmoid(ad.transpose(t, (2, 0, 1)))),
        lambda t: ad.tsum(ad.sigmoid(ad.slice_axis(t, 1, 1, 3))),
        lambda t: ad.tsum(ad.sigmoid(ad.concat([t, t], axis=2))),
        lambda t: ad.tsum(ad.sigmoid(ad.clamp(t, 0.2, 0.8) * 0.5)),
        lambda t: ad.tsum(ad.sigmoid(ad.exp(t))),
        lambda t: ad.tsum(ad.sigmoid(ad.log(t + 1.5))),
        lambda t: ad.tsum(ad.sigmoid(ad.pow_scalar(t + 1.1, 1.7))),
        lambda t: ad.tsum(ad.sigmoid(t / (t + 2.0))),
        lambda t: ad.tsum(ad.sigmoid(ad.tmean(t, axis=1))),
        lambda t: ad.tsum(ad.sigmoid(ad.matmul(t, ad.transpose(t, (0, 2, 1))))),
    ]
    for f in checks:
        assert ad.grad_check(f, x, 1e-5) < 1e-4


def test_broadcast_gradients(rng):
    a = t64(rng.random((3, 1, 4)), requires_grad=True)
    b = t64(rng.random((2, 4)), requires_grad=True)
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(t * b)), a, 1e-5) < 1e-4
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(a * t)), b, 1e-5) < 1e-4
    assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(a - t)), b, 1e-5) < 1e-4


# -- grad_check itself ---------------------------------------------------------------


def test_grad_check_linear_is_exact(rng):
    x = t64(rng.random(6), requires_grad=True)
    w = t64(rng.standard_normal(6))
    assert ad.grad_check(lambda t: ad.tsum(t * w), x, 1e-5) <= 1e-10


def test_grad_check_detects_corrupted_gradient(rng):
    x = t64(rng.random(5), requires_grad=True)

    def broken(t):
        out = ad.tsum(t * t)
        # sabotage: rescale the recorded backward closure
        orig = out._backward
        if orig is not None:
            out._backward = lambda g: orig(g * 1.5)
        return out

    assert ad.grad_check(broken, x, 1e-5) > 1e-2
