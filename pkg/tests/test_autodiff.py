"""Unit tests for the reverse-mode tensor engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifereid.autodiff import (
    Tensor,
    backward,
    conv2d,
    gem_pool,
    grad_check,
    l2_normalize,
    softmax_cross_entropy,
    zero_grads,
)
from lifereid.errors import (
    DegenerateInputError,
    DimensionError,
    GraphStateError,
    LabelError,
    NumericError,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- basic ops


class TestElementwise:
    def test_add_mul_values(self):
        a = Tensor(np.array([1.0, 2.0]))
        b = Tensor(np.array([3.0, 4.0]))
        np.testing.assert_array_equal((a + b).data, [4.0, 6.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 8.0])

    def test_scalar_operands(self):
        a = Tensor(np.array([1.0, 2.0]))
        np.testing.assert_array_equal((a + 1.0).data, [2.0, 3.0])
        np.testing.assert_array_equal((a * 2.0).data, [2.0, 4.0])
        np.testing.assert_array_equal((a / 2.0).data, [0.5, 1.0])

    def test_broadcast_gradient_sums_over_expansion(self):
        a = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.ones((2,)), requires_grad=True)
        loss = (a * b).sum()
        backward(loss)
        # b participates in all three rows
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])
        np.testing.assert_array_equal(a.grad, np.ones((3, 2)))

    def test_relu_subgradient_zero_at_kink(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        backward(x.relu().sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_clamp_min_subgradient_zero_at_kink(self):
        x = Tensor(np.array([-0.5, 0.0, 0.5]), requires_grad=True)
        backward(x.clamp_min(0.0).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_sqrt_subgradient_zero_at_zero(self):
        x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
        backward(x.sqrt().sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.25])

    def test_sigmoid_range_and_grad(self):
        x = Tensor(np.array([-30.0, 0.0, 30.0]))
        y = x.sigmoid()
        assert np.all(y.data > 0.0) and np.all(y.data < 1.0)
        assert y.data[1] == 0.5
        # extreme inputs stay finite and in [0,1] (no overflow in exp)
        z = Tensor(np.array([-800.0, 800.0])).sigmoid()
        assert np.all(np.isfinite(z.data))
        assert np.all((z.data >= 0.0) & (z.data <= 1.0))
        err = grad_check(lambda t: t.sigmoid().sum(), [Tensor(np.array([0.3, -1.2]), requires_grad=True)])
        assert err < 1e-6

    def test_take_rows_duplicate_indices_accumulate(self):
        x = Tensor(np.eye(3), requires_grad=True)
        y = x.take_rows(np.array([0, 0, 2]))
        backward(y.sum())
        # row 0 selected twice -> its gradient accumulates twice
        expected = np.array([[2.0] * 3, [0.0] * 3, [1.0] * 3])
        np.testing.assert_array_equal(x.grad, expected)

    def test_narrow_slices_rows(self):
        x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        y = x.narrow(0, 1, 2)
        np.testing.assert_array_equal(y.data, x.data[1:3])
        backward(y.sum())
        expected = np.zeros((4, 3))
        expected[1:3] = 1.0
        np.testing.assert_array_equal(x.grad, expected)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = Tensor(a) @ Tensor(np.eye(2))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_arithmetic(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal((a @ b).data, [[3.0], [7.0]])

    def test_gradient_finite_difference(self):
        rng = _rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        err = grad_check(lambda x, y: (x @ y).sum(), [a, b])
        assert err < 1e-6

    def test_inner_extent_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestReductions:
    def test_sum_axis_keepdims(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(x.sum(axis=1).data, [3.0, 12.0])
        assert x.sum(axis=1, keepdims=True).data.shape == (2, 1)

    def test_mean_gradient_uniform(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(x.mean())
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6.0))


# ---------------------------------------------------------------- conv2d


class TestConv2d:
    def test_identity_kernel_exact(self):
        rng = _rng(2)
        x = rng.random((3, 6, 5))
        k = np.zeros((3, 3, 1, 1))
        for c in range(3):
            k[c, c, 0, 0] = 1.0
        out = conv2d(Tensor(x), Tensor(k), stride=1, pad=0)
        np.testing.assert_array_equal(out.data, x)

    def test_shape_arithmetic(self):
        x = Tensor(np.zeros((3, 40, 16)))
        k = Tensor(np.zeros((16, 3, 3, 3)))
        assert conv2d(x, k, stride=1, pad=1).data.shape == (16, 40, 16)

    def test_stride_two_shape(self):
        x = Tensor(np.zeros((2, 16, 40, 16)))
        k = Tensor(np.zeros((32, 16, 3, 3)))
        assert conv2d(x, k, stride=2, pad=1).data.shape == (2, 32, 20, 8)

    def test_gradient_finite_difference(self):
        rng = _rng(3)
        x = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        err = grad_check(lambda a, b: conv2d(a, b, stride=1, pad=1).sum(), [x, k])
        assert err < 1e-6

    def test_gradient_strided(self):
        rng = _rng(4)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        err = grad_check(
            lambda a, b: (conv2d(a, b, stride=2, pad=1) ** 2.0).sum(), [x, k]
        )
        assert err < 1e-6

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), 1, 0)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))), 1, 1)

    def test_window_larger_than_padded_input_rejected(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), 1, 0)


# ---------------------------------------------------------------- gem_pool


class TestGemPool:
    def test_p1_is_mean(self):
        rng = _rng(5)
        x = rng.random((4, 3, 3)) + 0.1
        out = gem_pool(Tensor(x), p=1.0)
        np.testing.assert_allclose(out.data, x.mean(axis=(1, 2)), atol=1e-12)

    def test_hand_value_p3(self):
        x = np.array([[[1.0, 2.0]]])
        out = gem_pool(Tensor(x), p=3.0)
        np.testing.assert_allclose(out.data, [((1.0 + 8.0) / 2.0) ** (1.0 / 3.0)])
        assert abs(out.data[0] - 1.650964) < 1e-6

    def test_large_p_approaches_max(self):
        x = np.array([[[1.0, 2.0]]])
        out = gem_pool(Tensor(x), p=64.0)
        assert abs(out.data[0] - 2.0) < 0.05

    def test_batched_shape(self):
        out = gem_pool(Tensor(np.ones((4, 32, 20, 8))), p=3.0)
        assert out.data.shape == (4, 32)

    def test_gradient_finite_difference(self):
        rng = _rng(6)
        x = Tensor(rng.random((3, 4, 4)) + 0.5, requires_grad=True)
        err = grad_check(lambda a: gem_pool(a, p=3.0).sum(), [x])
        assert err < 1e-6

    def test_empty_spatial_rejected(self):
        with pytest.raises(DimensionError):
            gem_pool(Tensor(np.zeros((3, 0, 4))), p=3.0)


# ---------------------------------------------------------------- softmax CE


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_z(self):
        for z in (2, 5, 11):
            logits = Tensor(np.zeros((3, z)))
            onehot = np.zeros((3, z))
            onehot[np.arange(3), [0, 1, z - 1]] = 1.0
            loss = softmax_cross_entropy(logits, onehot)
            np.testing.assert_allclose(loss.data, np.log(z), atol=1e-12)

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 60.0
        onehot = np.zeros((1, 4))
        onehot[0, 2] = 1.0
        loss = softmax_cross_entropy(Tensor(logits), onehot)
        assert loss.data < 1e-12

    def test_softmax_rows_sum_to_one(self):
        rng = _rng(7)
        logits = Tensor(rng.normal(size=(6, 9)) * 30.0, requires_grad=True)
        onehot = np.zeros((6, 9))
        onehot[np.arange(6), np.arange(6)] = 1.0
        loss = softmax_cross_entropy(logits, onehot)
        backward(loss)
        # grad = (softmax - onehot)/B, so softmax = B*grad + onehot
        soft = 6.0 * logits.grad + onehot
        np.testing.assert_allclose(soft.sum(axis=1), np.ones(6), atol=1e-12)

    def test_gradient_finite_difference(self):
        rng = _rng(8)
        logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        onehot = np.zeros((4, 6))
        onehot[np.arange(4), [1, 0, 5, 3]] = 1.0
        err = grad_check(lambda l: softmax_cross_entropy(l, onehot), [logits])
        assert err < 1e-6

    def test_non_one_hot_rejected(self):
        logits = Tensor(np.zeros((2, 3)))
        bad = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(LabelError):
            softmax_cross_entropy(logits, bad)
        with pytest.raises(LabelError):
            softmax_cross_entropy(logits, np.full((2, 3), 0.5))


# ---------------------------------------------------------------- l2_normalize


class TestL2Normalize:
    def test_hand_arithmetic(self):
        out = l2_normalize(Tensor(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_idempotent_on_unit_vectors(self):
        rng = _rng(9)
        v = rng.normal(size=(5, 8))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        out = l2_normalize(Tensor(v))
        np.testing.assert_allclose(out.data, v, atol=1e-12)

    def test_output_norms_unit(self):
        rng = _rng(10)
        out = l2_normalize(Tensor(rng.normal(size=(7, 16)) * 3.0))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)

    def test_gradient_finite_difference(self):
        rng = _rng(11)
        v = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        coeff = Tensor(rng.normal(size=(3, 6)))  # fixed mixing weights
        err = grad_check(lambda t: (l2_normalize(t) * coeff).sum(), [v])
        assert err < 1e-6

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize(Tensor(np.zeros((1, 4))))


# ---------------------------------------------------------------- backward


class TestBackward:
    def test_sum_of_squares_grad(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward((x ** 2.0).sum())
        np.testing.assert_array_equal(x.grad, 6.0)

    def test_disconnected_leaf_zero_grad(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(y.grad, [0.0, 0.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3))
        with pytest.raises(DimensionError):
            backward(x * 2.0)

    def test_double_backward_rejected(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        loss = (x ** 2.0).sum()
        backward(loss)
        with pytest.raises(GraphStateError):
            backward(loss)

    def test_reuse_of_consumed_intermediate_rejected(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        mid = x * 2.0
        backward(mid.sum())
        with pytest.raises(GraphStateError):
            backward(mid.sum())

    def test_grad_accumulates_across_graphs(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        backward((x * 2.0).sum())
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, 5.0)
        zero_grads([x])
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_gradient_linearity(self):
        # backward(f+g) == backward(f) then backward(g), accumulated
        rng = _rng(12)
        base = rng.normal(size=(3, 3))
        x1 = Tensor(base.copy(), requires_grad=True)
        backward(((x1 * x1).sum() + (x1 * 3.0).sum()).sum())
        x2 = Tensor(base.copy(), requires_grad=True)
        backward((x2 * x2).sum())
        backward((x2 * 3.0).sum())
        np.testing.assert_allclose(x1.grad, x2.grad, atol=1e-12)

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_nonfinite_loss_rejected(self):
        x = Tensor(np.array(1e308))
        with pytest.raises(NumericError):
            backward((x * x).sum())

    def test_composite_chain_gradient(self):
        # conv -> relu -> gem -> matmul -> CE, all leaves checked
        rng = _rng(13)
        x = Tensor(rng.random((2, 3, 6, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)) * 0.5, requires_grad=True)
        onehot = np.zeros((2, 3))
        onehot[[0, 1], [0, 2]] = 1.0

        def f(xi, ki, wi):
            m = conv2d(xi, ki, stride=1, pad=1).relu()
            feat = gem_pool(m, p=3.0)
            return softmax_cross_entropy(feat @ wi, onehot)

        err = grad_check(f, [x, k, w])
        assert err < 1e-4


# ---------------------------------------------------------------- grad_check


class TestGradCheck:
    def test_quadratic_near_exact(self):
        err = grad_check(lambda x: (x ** 2.0).sum(), [Tensor(np.array(1.0), requires_grad=True)])
        assert err < 1e-9

    def test_h_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: x.sum(), [Tensor(np.ones(2), requires_grad=True)], h=1e-2)
        with pytest.raises(ValueError):
            grad_check(lambda x: x.sum(), [Tensor(np.ones(2), requires_grad=True)], h=1e-8)

    def test_detects_wrong_gradient(self):
        # sabotaged function: forward x^2 but via independent leaf -> zero grad
        def f(x):
            return (Tensor(x.data.copy()) ** 2.0).sum() + x.sum() * 0.0

        err = grad_check(f, [Tensor(np.array([1.5]), requires_grad=True)])
        assert err > 1e-2


# ---------------------------------------------------------------- properties


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=5))
def test_property_sum_grad_is_ones(rows, cols):
    x = Tensor(np.random.default_rng(rows * 7 + cols).normal(size=(rows, cols)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((rows, cols)))


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_property_elementwise_grads_match_fd(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    # sample away from kinks: |x| > 1e-3 for relu
    x = rng.normal(size=(3, 4))
    x = np.where(np.abs(x) < 1e-3, x + 0.1, x)
    op = data.draw(st.sampled_from(["relu", "sigmoid", "exp", "square"]))
    fns = {
        "relu": lambda t: t.relu().sum(),
        "sigmoid": lambda t: t.sigmoid().sum(),
        "exp": lambda t: t.exp().sum(),
        "square": lambda t: (t ** 2.0).sum(),
    }
    assert grad_check(fns[op], [Tensor(x, requires_grad=True)]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_property_l2_normalize_unit_output(seed):
    v = np.random.default_rng(seed).normal(size=(4, 6))
    v[np.all(np.abs(v) < 1e-6, axis=1)] += 1.0
    out = l2_normalize(Tensor(v))
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)
