"""Engine-level tests: forward semantics, gradients vs central differences,
tape behaviour, optimizers."""

import math

import numpy as np
import pytest

from taskaug import tensor as T
from taskaug.tensor import (
    Adam,
    DomainError,
    SGDMomentum,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    grad_check,
)


def rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


class TestForward:
    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_dense_identity(self):
        x = Tensor(rand((4, 3), 0))
        out = T.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x.data)

    def test_dense_hand_computed(self):
        out = T.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        assert out.data.tolist() == [[3.0]]

    def test_dense_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))

    def test_log_sqrt_domain(self):
        with pytest.raises(DomainError):
            T.log(Tensor([0.0, 1.0]))
        with pytest.raises(DomainError):
            T.sqrt(Tensor([-1.0]))

    def test_broadcast_rejects_incompatible(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))

    def test_pairwise_zero_diagonal_exact(self):
        x = Tensor(rand((6, 5), 1))
        d = T.euclidean_pairwise(x, x)
        assert np.all(np.diag(d.data) == 0.0)
        assert np.all(d.data >= 0.0)

    def test_conv2d_zero_input(self):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        k = Tensor(rand((1, 1, 3, 3), 2))
        out = T.conv2d(x, k, stride=1, padding=1)
        assert out.shape == (1, 1, 3, 3)
        assert np.all(out.data == 0.0)

    def test_conv2d_same_size_rule(self):
        x = Tensor(rand((1, 1, 5, 5), 3))
        out = T.conv2d(x, Tensor(rand((1, 1, 3, 3), 4)), stride=1, padding=1)
        assert out.shape == (1, 1, 5, 5)

    @pytest.mark.parametrize("k", [1, 3, 5, 7, 11, 15])
    def test_conv2d_same_size_all_pool_sizes(self, k):
        x = Tensor(rand((2, 3, 16, 16), k))
        kern = Tensor(rand((3, 3, k, k), k + 1))
        out = T.conv2d(x, kern, stride=1, padding=(k - 1) // 2)
        assert out.shape == x.shape

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), padding=1)

    def test_softmax_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((4, 5)))
        loss = T.softmax_cross_entropy(logits, np.zeros(4, dtype=int))
        assert math.isclose(float(loss.data), math.log(5.0), rel_tol=1e-12)

    def test_softmax_cross_entropy_saturated(self):
        loss = T.softmax_cross_entropy(Tensor([[10.0, -10.0]]), np.array([0]))
        assert float(loss.data) < 1e-4

    def test_softmax_cross_entropy_rejects_bad_label(self):
        with pytest.raises(DomainError):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_softmax_rows_sum_to_one(self):
        p = T.softmax(rand((7, 4), 5) * 10)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_cross_entropy_nonnegative(self):
        for seed in range(5):
            logits = Tensor(rand((6, 4), seed) * 8)
            labels = np.random.default_rng(seed).integers(0, 4, size=6)
            assert float(T.softmax_cross_entropy(logits, labels).data) >= 0.0


class TestBackward:
    def test_sum_grad_ones(self):
        x = Tensor(rand((3, 4), 0), requires_grad=True)
        with Tape():
            loss = T.reduce_sum(x)
        backward(loss)
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_unused_leaf_gets_zero(self):
        x = Tensor(rand((3,), 1), requires_grad=True)
        y = Tensor(rand((3,), 2), requires_grad=True)
        with Tape():
            loss = T.reduce_sum(T.add(y, T.scale(x, 0.0)))
        backward(loss)
        assert np.all(x.grad == 0.0)

    def test_disconnected_leaf_stays_none(self):
        x = Tensor(rand((3,), 1), requires_grad=True)
        y = Tensor(rand((3,), 2), requires_grad=True)
        with Tape():
            loss = T.reduce_sum(y)
        backward(loss)
        assert x.grad is None

    def test_backward_rejects_nonscalar(self):
        x = Tensor(rand((3,), 0), requires_grad=True)
        with Tape():
            out = T.scale(x, 2.0)
        with pytest.raises(TapeError):
            backward(out)

    def test_backward_requires_tape(self):
        x = Tensor(rand((3,), 0), requires_grad=True)
        loss = T.reduce_sum(x)
        with pytest.raises(TapeError):
            backward(loss)

    def test_repeated_backward_accumulates(self):
        x = Tensor(rand((3,), 0), requires_grad=True)
        with Tape():
            loss = T.reduce_sum(x)
        backward(loss)
        backward(loss)
        assert np.allclose(x.grad, 2.0)

    def test_mean_square_analytic(self):
        x = Tensor(rand((8,), 3), requires_grad=True)
        with Tape():
            loss = T.reduce_mean(T.square(x))
        backward(loss)
        expected = 2.0 * x.data / x.size
        assert np.max(np.abs(x.grad - expected) / np.abs(expected)) < 1e-6

    def test_backward_is_linear(self):
        a, b = 2.5, -1.25
        base = rand((4, 3), 7)

        def grads_of(fn):
            x = Tensor(base.copy(), requires_grad=True)
            with Tape():
                loss = fn(x)
            backward(loss)
            return x.grad

        g1 = grads_of(lambda x: T.reduce_sum(T.square(x)))
        g2 = grads_of(lambda x: T.reduce_mean(T.exp(x)))
        combined = grads_of(
            lambda x: T.add(
                T.scale(T.reduce_sum(T.square(x)), a),
                T.scale(T.reduce_mean(T.exp(x)), b),
            )
        )
        assert np.max(np.abs(combined - (a * g1 + b * g2))) < 1e-10

    def test_two_op_chain_vs_finite_differences(self):
        x = Tensor(rand((5,), 9))
        err = grad_check(lambda t: T.reduce_sum(T.square(T.relu(t))), x, eps=1e-4)
        assert err < 1e-4


class TestGradCheckAllOps:
    """Central-difference oracle over each differentiable op."""

    @pytest.mark.parametrize("seed", range(10))
    def test_conv2d_input_grad(self, seed):
        x = Tensor(rand((1, 2, 4, 4), seed))
        k = Tensor(rand((3, 2, 3, 3), seed + 100))
        err = grad_check(lambda t: T.reduce_sum(T.conv2d(t, k, 1, 1)), x, eps=1e-4)
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_conv2d_kernel_grad(self, seed):
        x = Tensor(rand((2, 2, 5, 5), seed))
        k = Tensor(rand((2, 2, 3, 3), seed + 50))
        err = grad_check(lambda t: T.reduce_sum(T.conv2d(x, t, 1, 1)), k, eps=1e-4)
        assert err < 1e-4

    def test_conv2d_strided_grad(self):
        x = Tensor(rand((1, 2, 6, 6), 0))
        k = Tensor(rand((2, 2, 3, 3), 1))
        err = grad_check(lambda t: T.reduce_sum(T.conv2d(t, k, 2, 1)), x, eps=1e-4)
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_dense_grads(self, seed):
        x = Tensor(rand((3, 4), seed))
        w = Tensor(rand((4, 2), seed + 1))
        b = Tensor(rand((2,), seed + 2))
        assert grad_check(lambda t: T.reduce_sum(T.dense(t, w, b)), x) < 1e-4
        assert grad_check(lambda t: T.reduce_sum(T.dense(x, t, b)), w) < 1e-4
        assert grad_check(lambda t: T.reduce_sum(T.dense(x, w, t)), b) < 1e-4

    @pytest.mark.parametrize(
        "fn",
        [
            lambda t: T.reduce_sum(T.relu(t)),
            lambda t: T.reduce_sum(T.square(t)),
            lambda t: T.reduce_sum(T.exp(t)),
            lambda t: T.reduce_mean(t),
            lambda t: T.reduce_sum(T.mul(t, t)),
            lambda t: T.reduce_sum(T.sub(t, T.scale(t, 0.5))),
            lambda t: T.reduce_sum(T.square(T.reduce_mean(t, axis=0))),
            lambda t: T.reduce_sum(T.square(T.reduce_sum(t, axis=1))),
        ],
    )
    def test_elementwise_grads(self, fn):
        x = Tensor(rand((4, 3), 11) + 2.0)  # shifted away from relu kink
        assert grad_check(fn, x, eps=1e-5) < 1e-4

    def test_log_sqrt_grads(self):
        x = Tensor(np.abs(rand((6,), 12)) + 0.5)
        assert grad_check(lambda t: T.reduce_sum(T.log(t)), x, eps=1e-6) < 1e-4
        assert grad_check(lambda t: T.reduce_sum(T.sqrt(t)), x, eps=1e-6) < 1e-4

    def test_broadcast_grads(self):
        x = Tensor(rand((3, 4), 13))
        col = Tensor(rand((3, 1), 14))
        row = Tensor(rand((4,), 15))
        assert grad_check(lambda t: T.reduce_sum(T.mul(T.add(x, t), row)), col) < 1e-4
        assert grad_check(lambda t: T.reduce_sum(T.mul(T.add(x, col), t)), row) < 1e-4

    def test_pairwise_grads(self):
        a = Tensor(rand((4, 3), 16))
        b = Tensor(rand((5, 3), 17))
        assert grad_check(lambda t: T.reduce_sum(T.euclidean_pairwise(t, b)), a) < 1e-4
        assert grad_check(lambda t: T.reduce_sum(T.euclidean_pairwise(a, t)), b) < 1e-4

    def test_take_rows_concat_reshape_grads(self):
        x = Tensor(rand((5, 3), 18))

        def fn(t):
            picked = T.take_rows(t, [0, 2, 2, 4])
            joined = T.concat([picked, T.scale(picked, 2.0)], axis=1)
            return T.reduce_sum(T.square(T.reshape(joined, (2, 12))))

        assert grad_check(fn, x) < 1e-4

    def test_max_pool_grad(self):
        x = Tensor(rand((2, 2, 4, 4), 19))
        assert grad_check(lambda t: T.reduce_sum(T.square(T.max_pool2d(t))), x) < 1e-4

    def test_linear_solve_grads(self):
        rng = np.random.default_rng(20)
        a = Tensor(np.eye(4) + 0.1 * rng.normal(size=(4, 4)))
        b = Tensor(rng.normal(size=(4, 2)))
        assert grad_check(lambda t: T.reduce_sum(T.square(T.linear_solve(t, b))), a) < 1e-4
        assert grad_check(lambda t: T.reduce_sum(T.square(T.linear_solve(a, t))), b) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_cross_entropy_grad(self, seed):
        rng = np.random.default_rng(seed)
        logits = Tensor(rng.normal(size=(3, 4)))
        labels = rng.integers(0, 4, size=3)
        err = grad_check(lambda t: T.softmax_cross_entropy(t, labels), logits, eps=1e-4)
        assert err < 1e-4


class TestGradCheckHarness:
    def test_sum_is_exact(self):
        x = Tensor(rand((5,), 0))
        assert grad_check(lambda t: T.reduce_sum(t), x) < 1e-10

    def test_detects_halved_gradient(self):
        # bogus op: forward 2*sum(x), backward claims d/dx = 1 (true value 2)
        def wrong_double(t):
            def bwd(g):
                return (np.full(t.shape, g),)

            return T._record(np.asarray(t.data.sum() * 2.0), (t,), bwd)

        x = Tensor(rand((4,), 1))
        assert grad_check(wrong_double, x) > 0.4

    def test_detects_dropped_gradient(self):
        def dropped(t):
            def bwd(g):
                return (np.zeros(t.shape),)

            return T._record(np.asarray(t.data.sum()), (t,), bwd)

        x = Tensor(rand((4,), 2))
        assert abs(grad_check(dropped, x) - 1.0) < 1e-6


class TestOptimizers:
    def _params(self, value, grad):
        class Bag(dict):
            def items(self):
                return super().items()

        t = Tensor(np.array([value]), requires_grad=True)
        t.grad = np.array([grad])
        bag = Bag()
        bag["p"] = t
        return bag, t

    def test_zero_grad_no_change(self):
        for opt in (Adam(0.1), SGDMomentum(0.1, 0.9)):
            bag, t = self._params(1.5, 0.0)
            opt.step(bag)
            assert t.data[0] == 1.5
            assert t.grad is None

    def test_sgd_hand_computed(self):
        bag, t = self._params(1.0, 2.0)
        SGDMomentum(0.1, 0.0).step(bag)
        assert math.isclose(t.data[0], 0.8, rel_tol=1e-12)

    def test_missing_grad_rejected(self):
        bag, t = self._params(1.0, 2.0)
        t.grad = None
        with pytest.raises(ValueError, match="no gradient"):
            Adam(0.1).step(bag)

    def test_adam_minimizes_quadratic(self):
        bag, t = self._params(1.0, 0.0)
        opt = Adam(0.1)
        losses = []
        for _ in range(200):
            losses.append(float(t.data[0] ** 2))
            t.grad = 2.0 * t.data
            opt.step(bag)
        assert abs(t.data[0]) < 0.05
        # loss trend is downward overall
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
