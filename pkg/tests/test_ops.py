import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldrcnet import ops
from ldrcnet.tensor import ShapeError, Tensor

from conftest import direct_conv, leaf


@given(
    n=st.integers(1, 2),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    size=st.integers(5, 9),
    k=st.sampled_from([1, 3]),
    stride=st.integers(1, 2),
    padding=st.integers(0, 2),
    dilation=st.integers(1, 2),
    seed=st.integers(0, 2**16),
)
def test_conv2d_matches_direct_loop(n, cin, cout, size, k, stride, padding, dilation, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cin, size, size)).astype(np.float32)
    w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32)
    if ops.conv_output_size(size, k, stride, padding, dilation) < 1:
        return
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation).data
    want = direct_conv(x, w, b, stride, padding, dilation)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_conv2d_reference_agrees_with_direct_loop(rng):
    x = rng.standard_normal((2, 3, 9, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(ops.conv2d_reference(x, w, None, 2, 2, 2), direct_conv(x, w, None, 2, 2, 2), atol=1e-12)


def test_conv2d_identity_kernel_copies_input(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = np.zeros((2, 2, 3, 3), np.float32)
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, x)


def test_conv2d_linearity(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    a = ops.conv2d(Tensor(x * np.float32(2.5)), w, padding=1).data
    b = 2.5 * ops.conv2d(Tensor(x), w, padding=1).data
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


def test_conv2d_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((2, 3, 7, 7))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 3, 1, 1))))


def test_avgpool_forward_counts_padding_as_zero():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = ops.avgpool2d(x, 3, 1, 1).data[0, 0]
    assert out[1, 1] == pytest.approx(1.0)
    assert out[0, 0] == pytest.approx(4 / 9)


def test_avgpool_gradient_is_one_over_k_squared():
    x = leaf(np.zeros((1, 1, 4, 4)))
    ops.sum_all(ops.avgpool2d(x, 2)).backward()
    np.testing.assert_allclose(x.grad, np.full((1, 1, 4, 4), 0.25))


def test_global_avgpool():
    x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
    np.testing.assert_allclose(ops.global_avgpool(x).data.ravel(), [1.5, 5.5])


def test_sigmoid_is_stable_for_large_inputs():
    out = ops.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_relu_gradient_mask():
    x = leaf([[-1.0, 0.5, 2.0]])
    ops.sum_all(ops.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 1.0]])


def test_concat_then_split_gradients(rng):
    a = leaf(rng.standard_normal((1, 2, 3, 3)))
    b = leaf(rng.standard_normal((1, 3, 3, 3)))
    out = ops.concat_channels([a, b])
    assert out.shape == (1, 5, 3, 3)
    wts = rng.standard_normal(out.shape)
    ops.weighted_sum(out, wts).backward()
    np.testing.assert_allclose(a.grad, wts[:, :2], rtol=1e-6)
    np.testing.assert_allclose(b.grad, wts[:, 2:], rtol=1e-6)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


def test_upsample_nearest_repeats():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ops.upsample2x(x, "nearest").data[0, 0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_bilinear_preserves_constants_and_interpolates():
    const = ops.upsample2x(Tensor(np.full((1, 1, 3, 3), 0.7)), "bilinear").data
    np.testing.assert_allclose(const, 0.7, rtol=1e-6)
    ramp = ops.upsample2x(Tensor(np.array([[[[0.0, 1.0]]]])), "bilinear").data[0, 0, 0]
    # half-pixel centres, clamped at the border
    np.testing.assert_allclose(ramp, [0.0, 0.25, 0.75, 1.0])


def test_upsample_unknown_mode():
    with pytest.raises(ValueError):
        ops.upsample2x(Tensor(np.zeros((1, 1, 2, 2))), "cubic")


def test_mse_value_and_gradient(rng):
    a = leaf(rng.standard_normal((2, 3, 4, 4)))
    b = Tensor(rng.standard_normal((2, 3, 4, 4)))
    loss = ops.mse_loss(a, b)
    diff = a.data.astype(np.float64) - b.data
    assert loss.item() == pytest.approx(np.mean(diff**2), rel=1e-12)
    loss.backward()
    np.testing.assert_allclose(a.grad, 2 * diff / diff.size, rtol=1e-5)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.mse_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


def test_scale_channels_requires_gate_shape():
    with pytest.raises(ShapeError):
        ops.scale_channels(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 3, 3))))


def test_elementwise_ops():
    a, b = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 5.0]))
    np.testing.assert_array_equal(ops.add(a, b).data, [4, 7])
    np.testing.assert_array_equal(ops.sub(a, b).data, [-2, -3])
    np.testing.assert_array_equal(ops.mul(a, b).data, [3, 10])
    np.testing.assert_array_equal(ops.add_scalar(a, 1).data, [2, 3])
    np.testing.assert_array_equal((a + b).data, [4, 7])
    np.testing.assert_array_equal((a * 2.0).data, [2, 4])


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_output_size_formula_sweep(k, stride, dilation):
    x = Tensor(np.zeros((1, 1, 23, 18)))
    w = Tensor(np.zeros((1, 1, k, k)))
    padding = dilation * (k - 1) // 2
    out = ops.conv2d(x, w, None, stride, padding, dilation)
    span = dilation * (k - 1) + 1
    assert out.shape[2] == (23 + 2 * padding - span) // stride + 1
    assert out.shape[3] == (18 + 2 * padding - span) // stride + 1
    assert out.shape[2] == ops.conv_output_size(23, k, stride, padding, dilation)
