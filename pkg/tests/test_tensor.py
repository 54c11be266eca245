"""Broadcast semantics and reverse-mode gradients of the tensor core."""

import numpy as np
import pytest

from hydronet import tensor as T


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestBroadcastShapes:
    def test_chain_of_hadamard_products_reaches_joint_shape(self):
        a = T.Tensor5(np.ones((2, 1, 1, 1, 4)))
        b = T.Tensor5(np.ones((1, 3, 1, 1, 4)))
        c = T.Tensor5(np.ones((1, 1, 5, 1, 4)))
        d = T.Tensor5(np.ones((2, 1, 1, 7, 4)))
        out = T.broadcast_mul(T.broadcast_mul(T.broadcast_mul(a, b), c), d)
        assert out.shape == (2, 3, 5, 7, 4)

    def test_all_ones_is_identity(self):
        ones = T.Tensor5(np.ones((1, 3, 1, 1, 4)))
        b = T.Tensor5(rand((2, 3, 5, 1, 4)))
        out = T.broadcast_mul(ones, b)
        assert np.array_equal(out.values, np.broadcast_to(b.values, (2, 3, 5, 1, 4)))

    def test_incompatible_shapes_error_names_axis(self):
        a = T.Tensor5(np.ones((2, 1, 1, 1, 4)))
        b = T.Tensor5(np.ones((3, 1, 1, 1, 4)))
        with pytest.raises(T.ShapeMismatchError, match="case"):
            T.broadcast_mul(a, b)
        c = T.Tensor5(np.ones((2, 1, 4, 1, 4)))
        d = T.Tensor5(np.ones((2, 1, 3, 1, 4)))
        with pytest.raises(T.ShapeMismatchError, match="time"):
            T.broadcast_mul(c, d)

    def test_wrong_rank_rejected(self):
        with pytest.raises(T.ShapeMismatchError):
            T.Tensor5(np.ones((2, 3)))

    @pytest.mark.parametrize("seed", range(8))
    def test_broadcast_equals_materialized_bit_exactly(self, seed):
        rng = np.random.default_rng(seed)
        shape_a = tuple(rng.choice([1, int(e)]) for e in (3, 2, 4, 2)) + (3,)
        shape_b = tuple(rng.choice([1, int(e)]) for e in (3, 2, 4, 2)) + (3,)
        a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
        joint = T.broadcast_shape(shape_a, shape_b)
        lazy = T.broadcast_mul(T.Tensor5(a), T.Tensor5(b)).values
        eager = np.ascontiguousarray(np.broadcast_to(a, joint)) * \
            np.ascontiguousarray(np.broadcast_to(b, joint))
        assert np.array_equal(lazy, eager)

    def test_output_shape_is_pure_function_of_input_shapes(self):
        shape_a, shape_b = (2, 1, 3, 1, 4), (1, 5, 3, 2, 4)
        for seed in range(3):
            a, b = T.Tensor5(rand(shape_a, seed)), T.Tensor5(rand(shape_b, seed + 50))
            assert T.broadcast_mul(a, b).shape == T.broadcast_shape(shape_a, shape_b)


class TestGradients:
    def test_mul_gradient_is_partner_summed_over_broadcast_axes(self):
        a_vals, b_vals = rand((2, 1, 3, 1, 2), 1), rand((2, 4, 3, 1, 2), 2)
        with T.Tape() as tape:
            a, b = T.Tensor5(a_vals), T.Tensor5(b_vals)
            tape.backward(T.sum_all(T.broadcast_mul(a, b)))
        assert np.allclose(a.grad, b_vals.sum(axis=1, keepdims=True), rtol=0, atol=1e-14)
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_mul_gradient_matches_finite_differences(self):
        b_vals = rand((2, 4, 3, 1, 2), 3)

        def f(x):
            return T.sum_all(T.broadcast_mul(x, T.Tensor5(b_vals)))

        err = T.grad_check(f, T.Tensor5(rand((2, 1, 3, 1, 2), 4)))
        assert err < 1e-6

    def test_sum_gradient_is_ones(self):
        with T.Tape() as tape:
            x = T.Tensor5(rand((2, 2, 2, 1, 3)))
            tape.backward(T.sum_all(x))
        assert np.array_equal(x.grad, np.ones_like(x.values))

    def test_half_sum_of_squares_gradient_is_x(self):
        vals = rand((2, 1, 2, 2, 3), 5)
        with T.Tape() as tape:
            x = T.Tensor5(vals)
            tape.backward(T.scale(T.sum_all(T.broadcast_mul(x, x)), 0.5))
        assert np.allclose(x.grad, vals, rtol=1e-14, atol=0)

    def test_gradient_map_and_tape_cleared(self):
        with T.Tape() as tape:
            x = T.Tensor5(rand((1, 1, 2, 1, 2)))
            y = T.broadcast_mul(x, x)
            grads = tape.backward(T.sum_all(y))
        assert x in grads and y in grads
        assert tape._ops == [] and tape._nodes == []

    def test_non_scalar_loss_rejected(self):
        with T.Tape() as tape:
            x = T.Tensor5(rand((2, 1, 1, 1, 2)))
            y = T.broadcast_mul(x, x)
            with pytest.raises(T.TapeError):
                tape.backward(y)

    def test_nested_tapes_rejected(self):
        with T.Tape():
            with pytest.raises(T.TapeError):
                with T.Tape():
                    pass


class TestAffine:
    def test_identity_weights_zero_bias_is_identity(self):
        x = T.Tensor5(rand((2, 1, 3, 2, 4)))
        out = T.affine(x, np.eye(4), np.zeros(4))
        assert np.array_equal(out.values, x.values)

    def test_zero_weights_yield_bias_rows(self):
        x = T.Tensor5(rand((2, 1, 3, 1, 4)))
        bias = np.array([1.5, -2.0, 0.25])
        out = T.affine(x, np.zeros((3, 4)), bias)
        assert np.array_equal(out.values, np.broadcast_to(bias, out.shape))

    def test_random_case_matches_hand_expansion(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 1, 1, 2, 2))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=3)
        out = T.affine(T.Tensor5(x), w, b).values
        expected = np.empty((1, 1, 1, 2, 3))
        for point in range(2):
            for o in range(3):
                expected[0, 0, 0, point, o] = (
                    w[o, 0] * x[0, 0, 0, point, 0] + w[o, 1] * x[0, 0, 0, point, 1] + b[o]
                )
        assert np.allclose(out, expected, rtol=1e-15, atol=0)

    def test_feature_extent_mismatch(self):
        with pytest.raises(T.ShapeMismatchError, match="feature"):
            T.affine(T.Tensor5(np.ones((1, 1, 1, 1, 4))), np.ones((2, 3)), np.zeros(2))

    def test_leading_axes_preserved(self):
        out = T.affine(T.Tensor5(np.ones((2, 3, 4, 5, 6))), np.ones((2, 6)), np.zeros(2))
        assert out.shape == (2, 3, 4, 5, 2)

    def test_weight_and_bias_gradients_match_fd(self):
        rng = np.random.default_rng(11)
        x_vals = rng.normal(size=(2, 1, 1, 3, 4))
        w = T.Param(rng.normal(size=(2, 4)))
        b = T.Param(rng.normal(size=2))
        with T.Tape() as tape:
            out = T.affine(T.Tensor5(x_vals), w, b)
            tape.backward(T.sum_all(T.broadcast_mul(out, out)))

        def loss_of(w_vals):
            y = x_vals @ w_vals.T + b.values
            return float((y * y).sum())

        assert np.allclose(w.grad, T.fd_gradient(loss_of, w.values), rtol=1e-6, atol=1e-9)

        def loss_of_b(b_vals):
            y = x_vals @ w.values.T + b_vals
            return float((y * y).sum())

        assert np.allclose(b.grad, T.fd_gradient(loss_of_b, b.values), rtol=1e-6, atol=1e-9)


class TestActivation:
    def test_tanh_at_zero(self):
        out = T.activation(T.Tensor5(np.zeros((1, 1, 1, 1, 1))), "tanh")
        assert out.item() == 0.0

    def test_leaky_relu_slope(self):
        x = T.Tensor5(np.full((1, 1, 1, 1, 1), -1.0))
        assert T.activation(x, "leaky_relu").item() == pytest.approx(-0.01)
        y = T.Tensor5(np.full((1, 1, 1, 1, 1), 2.5))
        assert T.activation(y, "leaky_relu").item() == pytest.approx(2.5)

    @pytest.mark.parametrize("kind", ["tanh", "leaky_relu"])
    def test_gradient_matches_fd(self, kind):
        # keep leaky-relu inputs away from the kink, where FD is one-sided
        vals = rand((2, 1, 2, 1, 3), 9)
        vals = np.where(np.abs(vals) < 0.05, 0.3, vals)

        def f(x):
            y = T.activation(x, kind)
            return T.sum_all(T.broadcast_mul(y, y))

        assert T.grad_check(f, T.Tensor5(vals)) < 1e-6

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation(T.Tensor5(np.zeros((1, 1, 1, 1, 1))), "relu6")


class TestGradCheck:
    def test_linear_map_is_essentially_exact(self):
        w = rand((3, 4), 21)

        def f(x):
            return T.sum_all(T.affine(x, w, np.zeros(3)))

        assert T.grad_check(f, T.Tensor5(rand((2, 1, 1, 1, 4), 22))) < 1e-9

    def test_tanh_chain(self):
        w1, w2 = rand((4, 3), 23), rand((2, 4), 24)

        def f(x):
            h = T.activation(T.affine(x, w1, np.zeros(4)), "tanh")
            return T.mean_all(T.affine(h, w2, np.zeros(2)))

        assert T.grad_check(f, T.Tensor5(rand((2, 1, 1, 2, 3), 25))) < 1e-6

    def test_deliberately_wrong_gradient_is_flagged(self):
        def bad_square(x):
            out = T.Tensor5(x.values * x.values)

            def backward():
                if out.grad is not None:
                    T._accumulate(x, out.grad * 3.0 * x.values)  # wrong: true factor is 2

            T._record((x, out), backward)
            return out

        def f(x):
            return T.sum_all(bad_square(x))

        err = T.grad_check(f, T.Tensor5(rand((1, 1, 1, 1, 3), 26) + 2.0))
        assert err > 0.1

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            T.grad_check(lambda x: T.sum_all(x), T.Tensor5(np.ones((1, 1, 1, 1, 1))), eps=0.0)
