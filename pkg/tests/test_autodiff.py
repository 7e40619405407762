import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from midg.autodiff import (
    MLP,
    ConfigError,
    ContractError,
    DomainError,
    NumericError,
    ShapeError,
    Tensor,
    concat,
    default_dtype,
    dropout,
    grad_reverse,
    gradcheck,
    gradcheck_params,
    keyed_rng,
    matmul,
    softmax,
)

finite = st.floats(-5, 5, allow_nan=False, width=64)


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        x = t64([[1.5, -2.0], [0.25, 4.0]])
        np.testing.assert_array_equal(matmul(t64(np.eye(2)), x).data, x.data)

    def test_hand_product(self):
        out = matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_backward_formula(self):
        rng = np.random.default_rng(0)
        a, b = t64(rng.normal(size=(2, 3))), t64(rng.normal(size=(3, 4)))
        g = rng.normal(size=(2, 4))
        (matmul(a, b) * g).sum().backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_gradcheck_both_operands(self):
        rng = np.random.default_rng(1)
        a0, b0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        assert gradcheck(lambda a: matmul(a, t64(b0, False)).sum(), a0) < 1e-6
        assert gradcheck(lambda b: matmul(t64(a0, False), b).sum(), b0) < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert Tensor([0.0]).sigmoid().data[0] == 0.5

    def test_sigmoid_extremes_are_finite(self):
        out = Tensor([-1000.0, 1000.0], dtype=np.float64).sigmoid().data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_square_derivative(self):
        x = t64([3.0])
        x.square().sum().backward()
        assert x.grad[0] == 6.0

    def test_relu_backward(self):
        x = t64([-1.0, 1.0])
        (x.relu() * t64([5.0, 7.0], False)).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 7.0])

    def test_log_domain(self):
        with pytest.raises(DomainError):
            t64([1.0, 0.0]).log()
        with pytest.raises(DomainError):
            t64([-2.0]).log()

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            t64(np.ones(3)) + t64(np.ones(4))
        with pytest.raises(ShapeError):
            t64(np.ones((2, 3))) * t64(np.ones((3, 2)))

    def test_broadcast_bias_gradient(self):
        x, b = t64(np.ones((4, 3))), t64(np.zeros(3))
        (x + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    @pytest.mark.parametrize(
        "fn",
        [
            lambda x: x.relu(),
            lambda x: x.sigmoid(),
            lambda x: x.tanh(),
            lambda x: x.exp(),
            lambda x: x.expm1(),
            lambda x: x.square(),
            lambda x: (x.square() + 1.0).log(),
            lambda x: x * x + x - 2.0 * x,
            lambda x: x / (x.square() + 1.0),
        ],
        ids=["relu", "sigmoid", "tanh", "exp", "expm1", "square", "log", "add_sub_mul", "div"],
    )
    def test_gradcheck(self, fn):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x0 = rng.normal(size=5)
            assert gradcheck(lambda x: (fn(x) * t64(np.arange(1.0, 6.0), False)).sum(), x0) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_ln2(self):
        out = softmax(t64([0.0, math.log(2.0)])).data
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-12)

    def test_stable_for_large_logits(self):
        out = softmax(t64([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_jacobian_gradcheck(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            w = t64(rng.normal(size=5), False)
            assert gradcheck(lambda x: (softmax(x) * w).sum(), rng.normal(size=5)) < 1e-6

    def test_axis_validation(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.ones((2, 3))), axis=2)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
    def test_simplex(self, x):
        out = softmax(Tensor(x, dtype=np.float64), axis=-1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestConcatMeanDropout:
    def test_concat_shape(self):
        out = concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 5)))], axis=1)
        assert out.shape == (2, 8)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 5)))], axis=1)

    def test_concat_gradient_split(self):
        a, b = t64(np.ones((2, 1))), t64(np.ones((2, 2)))
        (concat([a, b], axis=1) * t64([[1, 2, 3], [4, 5, 6]], False)).sum().backward()
        np.testing.assert_array_equal(a.grad, [[1], [4]])
        np.testing.assert_array_equal(b.grad, [[2, 3], [5, 6]])

    def test_mean_axis(self):
        x = t64([[1.0, 2.0], [3.0, 5.0]])
        x.mean(axis=0).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 0.5))

    def test_dropout_zero_rate_training(self):
        x = Tensor(np.arange(6.0))
        assert dropout(x, 0.0, True, keyed_rng(0)) is x

    def test_dropout_eval_identity(self):
        x = Tensor(np.arange(6.0))
        np.testing.assert_array_equal(dropout(x, 0.5, False).data, x.data)

    def test_dropout_rate_bounds(self):
        with pytest.raises(ConfigError):
            dropout(Tensor([1.0]), 1.0, True, keyed_rng(0))

    def test_dropout_statistics_and_scaling(self):
        x = Tensor(np.ones(200_000), dtype=np.float64)
        out = dropout(x, 0.25, True, keyed_rng(5)).data
        kept = out != 0
        assert abs(kept.mean() - 0.75) < 0.005
        np.testing.assert_allclose(out[kept], 1 / 0.75)

    def test_dropout_reproducible(self):
        x = Tensor(np.ones(100))
        a = dropout(x, 0.5, True, keyed_rng(1, 2, 3)).data
        b = dropout(x, 0.5, True, keyed_rng(1, 2, 3)).data
        np.testing.assert_array_equal(a, b)


class TestGradReverse:
    def test_forward_identity(self):
        x = Tensor([1.5, -2.0])
        out = grad_reverse(x, 1.0)
        assert out.data.tobytes() == x.data.tobytes()

    @pytest.mark.parametrize("lam,expected", [(1.0, [-1.0, 1.0]), (2.0, [-2.0, 2.0])])
    def test_backward_scaling(self, lam, expected):
        x = t64([1.5, -2.0])
        (grad_reverse(x, lam) * t64([1.0, -1.0], False)).sum().backward()
        np.testing.assert_array_equal(x.grad, expected)

    def test_inside_function_equals_negated_identity(self):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=4)
        w = t64(rng.normal(size=4), False)
        lam = 0.7
        x = t64(x0)
        (grad_reverse(x.tanh(), lam) * w).square().sum().backward()
        y = t64(x0)
        (y.tanh() * w).square().sum().backward()
        np.testing.assert_allclose(x.grad, -lam * y.grad, rtol=1e-15)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            grad_reverse(Tensor([1.0]), -0.1)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(0).normal(size=(3, 2)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_mean_square(self):
        x0 = np.array([1.0, -2.0, 3.0, 0.5])
        x = t64(x0)
        x.square().mean().backward()
        np.testing.assert_allclose(x.grad, x0 / 2)

    def test_loss_grad_is_one(self):
        x = t64([2.0])
        loss = x.square().sum()
        loss.backward()
        assert loss.grad == 1.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            t64([1.0, 2.0]).square().backward()

    def test_accumulates_across_calls(self):
        x = t64([3.0])
        loss = x.square().sum()
        loss.backward()
        loss.backward()
        assert x.grad[0] == 12.0

    def test_diamond_equals_expanded(self):
        # shared: u = x*y used twice; expanded rebuilds u separately
        x0, y0 = 1.3, -0.7
        x, y = t64([x0]), t64([y0])
        u = x * y
        (u.tanh() + u.square()).sum().backward()
        xe, ye = t64([x0]), t64([y0])
        ((xe * ye).tanh() + (xe * ye).square()).sum().backward()
        np.testing.assert_allclose(x.grad, xe.grad, rtol=1e-15)
        np.testing.assert_allclose(y.grad, ye.grad, rtol=1e-15)

    def test_ids_increase_and_precede_consumers(self):
        a = t64([1.0])
        b = a * 2.0
        c = b + a
        assert a.id < b.id < c.id
        assert all(p.id < c.id for p in c.parents)

    def test_composite_mlp_gradcheck(self):
        with default_dtype(np.float64):
            mlp = MLP(4, 6, 3, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(5, 4)), dtype=np.float64)
        err = gradcheck_params(lambda: softmax(mlp(x), axis=-1).square().mean(), mlp.parameters())
        assert err < 1e-4

    def test_deterministic(self):
        def run():
            with default_dtype(np.float64):
                mlp = MLP(3, 4, 2, keyed_rng(9))
            x = Tensor(keyed_rng(10).normal(size=(4, 3)))
            loss = dropout(mlp(x), 0.3, True, keyed_rng(11)).square().mean()
            loss.backward()
            return loss.data.tobytes(), [p.grad.tobytes() for p in mlp.parameters()]

        assert run() == run()


class TestGradcheck:
    def test_sum_of_squares(self):
        x0 = np.random.default_rng(7).normal(size=6)
        assert gradcheck(lambda x: x.square().sum(), x0, eps=1e-4) < 1e-7

    def test_softmax_dot(self):
        rng = np.random.default_rng(8)
        w = t64(rng.normal(size=5), False)
        assert gradcheck(lambda x: (softmax(x) * w).sum(), rng.normal(size=5)) < 1e-6

    def test_detects_wrong_gradient(self):
        def broken(x):
            return Tensor(x.data.sum() * 2, _parents=(x,), _backward=lambda g: (g * np.ones_like(x.data),))

        assert gradcheck(broken, np.ones(3)) > 0.5

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            gradcheck(lambda x: (x * np.inf).sum(), np.ones(2))

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            gradcheck(lambda x: x.sum(), np.ones(2), eps=0)


class TestPrecision:
    def test_default_is_float32(self):
        assert Tensor([1.0]).dtype == np.float32

    def test_context_switch(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    @settings(max_examples=50, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=8))
    def test_ops_preserve_dtype(self, values):
        x = Tensor(np.array(values, dtype=np.float32), requires_grad=True)
        out = softmax((x * 2.0 + 1.0).tanh()).sum()
        out.backward()
        assert out.dtype == np.float32 and x.grad.dtype == np.float32


def test_scalar_results_keep_float64():
    x = Tensor([0.1, 0.2], requires_grad=True, dtype=np.float64)
    out = x.sum() * 0.5 + 1.0
    assert out.dtype == np.float64
