import numpy as np
import pytest

from protodistill import autodiff as ad
from protodistill.exceptions import EmptyMaskError, ShapeError
from protodistill.gradcheck import check_gradients, numerical_grad, relative_error


def test_conv_identity_size_kernel():
    x = np.ones((1, 1, 3, 3))
    out = ad.conv(x, np.full((1, 1, 1, 1), 2.0), np.zeros(1), 2)
    np.testing.assert_array_equal(out.value, np.full((1, 1, 3, 3), 2.0))


def test_conv_same_padding_by_hand():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
    out = ad.conv(x, np.ones((1, 1, 1, 3)), np.zeros(1), 2)
    np.testing.assert_array_equal(out.value.ravel(), [3.0, 6.0, 5.0])


def test_conv_kernel_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 5, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    node_w = ad.Node(w)
    ad.backward(ad.sum_all(ad.conv(x, node_w, b, 2)))
    numeric = numerical_grad(lambda w_: ad.conv(x, w_, b, 2).value.sum(), [w], 0)
    assert relative_error(node_w.grad, numeric) < 1e-6


@pytest.mark.parametrize("dims", [2, 3])
def test_conv_all_gradients(dims):
    rng = np.random.default_rng(dims)
    spatial = (4, 5) if dims == 2 else (3, 4, 3)
    x = rng.normal(size=(2, 2) + spatial)
    w = rng.normal(size=(3, 2) + (3,) * dims)
    b = rng.normal(size=3)
    weights = rng.normal(size=(2, 3) + spatial)
    err = check_gradients(lambda x_, w_, b_: ad.sum_all(ad.mul(ad.conv(x_, w_, b_, dims), ad.Node(weights))), [x, w, b])
    assert err < 1e-6


def test_conv_output_shape_3d():
    out = ad.conv(np.zeros((1, 1, 4, 6, 5)), np.zeros((7, 1, 3, 3, 3)), np.zeros(7), 3)
    assert out.shape == (1, 7, 4, 6, 5)


@pytest.mark.parametrize(
    "x, w, b, dims",
    [
        (np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1), 2),  # channel mismatch
        (np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1), 2),  # even kernel
        (np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), 3),  # rank vs dims
        (np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 3, 3)), np.zeros(1), 2),  # bias length
    ],
)
def test_conv_rejects_bad_shapes(x, w, b, dims):
    with pytest.raises(ShapeError):
        ad.conv(x, w, b, dims)


def test_relu_values_and_subgradient_at_zero():
    x = ad.Node(np.array([-1.0, 0.0, 2.0]))
    y = ad.relu(x)
    np.testing.assert_array_equal(y.value, [0.0, 0.0, 2.0])
    ad.backward(ad.sum_all(y))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_add_zeros_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.add(x, np.zeros((2, 3))).value, x)


def test_mul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check_gradients(lambda a_, b_: ad.sum_all(ad.mul(ad.mul(a_, b_), a_)), [a, b]) < 1e-6


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        ad.mul(np.zeros((2, 2)), np.zeros(4))
    with pytest.raises(ShapeError):
        ad.scale(np.zeros(3), np.ones(3))


def test_masked_mean_by_hand():
    features = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = ad.masked_mean(features, np.array([[1, 0], [0, 1]]))
    assert out.value.tolist() == [2.5]


def test_masked_mean_full_mask_is_bitwise_plain_mean():
    rng = np.random.default_rng(2)
    features = rng.normal(size=(5, 7, 9))
    out = ad.masked_mean(features, np.ones((7, 9)))
    np.testing.assert_array_equal(out.value, features.reshape(5, -1).mean(axis=1))


def test_masked_mean_empty_mask():
    with pytest.raises(EmptyMaskError):
        ad.masked_mean(np.ones((2, 3, 3)), np.zeros((3, 3)))


def test_masked_mean_backward_distribution():
    features = ad.Node(np.ones((2, 2, 2)))
    mask = np.array([[1, 1], [0, 1]])
    out = ad.masked_mean(features, mask)
    ad.backward(ad.sum_all(ad.mul(out, ad.Node(np.array([3.0, 6.0])))))
    np.testing.assert_allclose(features.grad[0], mask * 1.0)
    np.testing.assert_allclose(features.grad[1], mask * 2.0)


def test_backward_of_sum_is_ones():
    x = ad.Node(np.random.default_rng(3).normal(size=(4, 3)))
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((4, 3)))


def test_backward_half_sum_of_squares():
    v = np.random.default_rng(4).normal(size=7)
    x = ad.Node(v)
    ad.backward(ad.scale(ad.sum_all(ad.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, v, rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar_root():
    with pytest.raises(ShapeError):
        ad.backward(ad.Node(np.zeros(3)))


def test_backward_twice_accumulates():
    x = ad.Node(np.array([1.0, -2.0]))
    y = ad.sum_all(ad.mul(ad.scale(x, 3.0), x))
    ad.backward(y)
    ad.backward(y)
    np.testing.assert_allclose(x.grad, 2 * 6.0 * x.value)


def test_shared_subexpression_equals_sum_of_paths():
    v = np.array([0.5, -1.5, 2.0])
    x = ad.Node(v)
    y = ad.mul(x, x)
    z = ad.sum_all(ad.add(ad.mul(y, x), y))  # x^3 + x^2 with y shared
    ad.backward(z)
    np.testing.assert_allclose(x.grad, 3 * v**2 + 2 * v)


def test_take_stack_reshape_gradients():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 4))

    def build(a_):
        s = ad.stack([ad.take(a_, 2), ad.take(a_, 0)])
        return ad.sum_all(ad.mul(ad.reshape(s, (2, 4)), ad.Node(w)))

    assert check_gradients(build, [a]) < 1e-6


def test_values_are_read_only():
    x = ad.Node(np.zeros(3))
    with pytest.raises(ValueError):
        x.value[0] = 1.0


def test_softmax_cross_entropy_uniform_two_class():
    logits = np.zeros((1, 2, 3, 3))
    labels = np.zeros((1, 3, 3), dtype=int)
    assert ad.softmax_cross_entropy(logits, labels).value == pytest.approx(np.log(2), abs=1e-15)


def test_soft_dice_perfect_one_hot():
    labels = np.array([[[0, 1], [2, 1]]])
    logits = 200.0 * np.moveaxis(np.eye(3)[labels], -1, 1)
    assert ad.soft_dice_loss(logits, labels).value < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_loss_op_gradients(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    assert check_gradients(lambda l: ad.softmax_cross_entropy(l, labels), [logits]) < 1e-6
    assert check_gradients(lambda l: ad.soft_dice_loss(l, labels), [logits]) < 1e-6
