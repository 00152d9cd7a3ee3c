"""Gradient and contract tests for the reverse-mode engine primitives."""

import numpy as np
import pytest

from vqdisc import autodiff as ad
from vqdisc.autodiff import Tape, Var

from helpers import check_op_gradients


@pytest.fixture(autouse=True)
def float64_mode():
    # tight finite-difference checks run at the engine's 64-bit test precision
    with ad.using_dtype(np.float64):
        yield


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestLinear:
    def test_identity(self):
        t = Tape()
        out = ad.linear(t, Var([[1.0, 0.0]]), Var(np.eye(2)), Var([0.0, 0.0]))
        assert np.allclose(out.data, [[1.0, 0.0]])

    def test_arithmetic(self):
        t = Tape()
        out = ad.linear(t, Var([[1.0, 2.0]]), Var([[1.0], [1.0]]), Var([3.0]))
        assert np.allclose(out.data, [[6.0]])

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ValueError):
            ad.linear(t, Var(np.zeros((2, 3))), Var(np.zeros((4, 2))), None)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        check_op_gradients(
            lambda t, v: ad.linear(t, v["x"], v["w"], v["b"]),
            {"x": rand(rng, 4, 3), "w": rand(rng, 3, 5), "b": rand(rng, 5)})

    def test_gradients_batched(self):
        rng = np.random.default_rng(2)
        check_op_gradients(
            lambda t, v: ad.linear(t, v["x"], v["w"], v["b"]),
            {"x": rand(rng, 2, 3, 4), "w": rand(rng, 4, 2), "b": rand(rng, 2)})


class TestSpaceToDepth:
    def test_definition_2x2(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        t = Tape()
        out = ad.space_to_depth(t, Var(x), 2)
        assert out.data.shape == (1, 1, 1, 4)
        assert np.allclose(out.data.ravel(), [1, 2, 3, 4])

    def test_ramp_block_layout(self):
        # 4x4 ramp, r=2: block (i,j) holds rows [2i,2i+1] x cols [2j,2j+1]
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        t = Tape()
        out = ad.space_to_depth(t, Var(x), 2)
        assert out.data.shape == (1, 2, 2, 4)
        expected = np.array([
            [[0, 1, 4, 5], [2, 3, 6, 7]],
            [[8, 9, 12, 13], [10, 11, 14, 15]],
        ], dtype=float)
        assert np.array_equal(out.data[0], expected)

    def test_inverse(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 2, 8, 8, 3)
        t = Tape()
        back = ad.depth_to_space(t, ad.space_to_depth(t, Var(x), 2), 2)
        assert np.array_equal(back.data, x)

    def test_inverse_property_over_divisible_shapes(self):
        rng = np.random.default_rng(30)
        for _ in range(20):
            r = int(rng.integers(1, 5))
            h = r * int(rng.integers(1, 5))
            w = r * int(rng.integers(1, 5))
            c = int(rng.integers(1, 4))
            x = rand(rng, 1, h, w, c)
            t = Tape()
            back = ad.depth_to_space(t, ad.space_to_depth(t, Var(x), r), r)
            assert np.array_equal(back.data, x)

    def test_non_divisible(self):
        t = Tape()
        with pytest.raises(ValueError):
            ad.space_to_depth(t, Var(np.zeros((1, 3, 4, 1))), 2)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        check_op_gradients(
            lambda t, v: ad.space_to_depth(t, v["x"], 2),
            {"x": rand(rng, 1, 4, 4, 2)})
        check_op_gradients(
            lambda t, v: ad.depth_to_space(t, v["x"], 2),
            {"x": rand(rng, 1, 2, 2, 8)})


class TestTransposedConv:
    def test_broadcast(self):
        x = np.full((1, 1, 1, 1), 2.0)
        k = np.ones((2, 2, 1, 1))
        t = Tape()
        out = ad.transposed_conv2d(t, Var(x), Var(k), 2)
        assert out.data.shape == (1, 2, 2, 1)
        assert np.allclose(out.data, 2.0)

    def test_shape_law(self):
        rng = np.random.default_rng(5)
        t = Tape()
        out = ad.transposed_conv2d(
            t, Var(rand(rng, 1, 4, 4, 3)), Var(rand(rng, 2, 2, 3, 5)), 2)
        assert out.data.shape == (1, 8, 8, 5)

    def test_kernel_stride_mismatch(self):
        t = Tape()
        with pytest.raises(ValueError):
            ad.transposed_conv2d(
                t, Var(np.zeros((1, 2, 2, 1))), Var(np.zeros((3, 3, 1, 1))), 2)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        check_op_gradients(
            lambda t, v: ad.transposed_conv2d(t, v["x"], v["k"], 2),
            {"x": rand(rng, 1, 3, 3, 2), "k": rand(rng, 2, 2, 2, 3)})


class TestActivations:
    def test_relu_values(self):
        t = Tape()
        out = ad.relu(t, Var([-1.0, 2.0]))
        assert np.allclose(out.data, [0.0, 2.0])

    def test_sigmoid_zero(self):
        t = Tape()
        out = ad.sigmoid(t, Var([0.0]))
        assert np.allclose(out.data, [0.5])

    def test_dispatcher(self):
        t = Tape()
        assert np.allclose(ad.activation(t, Var([-2.0]), "relu").data, [0.0])
        with pytest.raises(ValueError):
            ad.activation(t, Var([0.0]), "tanh")

    def test_gradients(self):
        rng = np.random.default_rng(7)
        # keep pre-activations away from the relu kink
        x = rand(rng, 3, 4)
        x[np.abs(x) < 0.05] = 0.1
        check_op_gradients(lambda t, v: ad.relu(t, v["x"]), {"x": x})
        check_op_gradients(lambda t, v: ad.sigmoid(t, v["x"]),
                           {"x": rand(rng, 3, 4)})


class TestPooling:
    def test_constant_field(self):
        t = Tape()
        out = ad.global_avg_pool(t, Var(np.full((1, 3, 3, 2), 7.0)))
        assert np.allclose(out.data, 7.0)

    def test_arithmetic(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        t = Tape()
        out = ad.global_avg_pool(t, Var(x))
        assert np.allclose(out.data, [[2.5]])

    def test_gradients(self):
        rng = np.random.default_rng(8)
        check_op_gradients(lambda t, v: ad.global_avg_pool(t, v["x"]),
                           {"x": rand(rng, 2, 3, 4, 2)})
        check_op_gradients(lambda t, v: ad.avg_pool2d(t, v["x"], 2),
                           {"x": rand(rng, 1, 4, 4, 3)})

    def test_avg_pool_constants(self):
        t = Tape()
        out = ad.avg_pool2d(t, Var(np.full((1, 4, 4, 2), 3.0)), 2)
        assert np.allclose(out.data, 3.0)


class TestCombinators:
    def test_add_and_concat(self):
        rng = np.random.default_rng(9)
        check_op_gradients(lambda t, v: ad.add(t, v["a"], v["b"]),
                           {"a": rand(rng, 3, 3), "b": rand(rng, 3, 3)})
        check_op_gradients(lambda t, v: ad.concat_channels(t, v["a"], v["b"]),
                           {"a": rand(rng, 2, 3), "b": rand(rng, 2, 5)})

    def test_scale_channels(self):
        rng = np.random.default_rng(10)
        check_op_gradients(lambda t, v: ad.scale_channels(t, v["x"], v["f"]),
                           {"x": rand(rng, 2, 3, 3, 4), "f": rand(rng, 2, 4)})

    def test_reshape(self):
        rng = np.random.default_rng(11)
        check_op_gradients(lambda t, v: ad.reshape(t, v["x"], (2, 12)),
                           {"x": rand(rng, 2, 3, 4)})

    def test_losses(self):
        rng = np.random.default_rng(12)
        target = rand(rng, 4, 3)
        check_op_gradients(lambda t, v: ad.mse_loss(t, v["p"], target),
                           {"p": rand(rng, 4, 3)})
        check_op_gradients(
            lambda t, v: ad.row_sq_norm_mean(t, v["p"], target),
            {"p": rand(rng, 4, 3)})

    def test_mse_value(self):
        t = Tape()
        out = ad.mse_loss(t, Var([[1.0, 1.0]]), np.array([[0.0, 2.0]]))
        assert np.allclose(out.data, 1.0)


class TestStraightThrough:
    def test_forward_replaces_value(self):
        t = Tape()
        x = Var([[1.0, 2.0]])
        q = np.array([[0.5, 0.5]])
        out = ad.straight_through(t, x, q)
        assert np.array_equal(out.data, q.astype(out.data.dtype))

    def test_backward_is_identity(self):
        t = Tape()
        x = Var([[1.0, 2.0]])
        out = ad.straight_through(t, x, np.array([[9.0, 9.0]]))
        loss = ad.mse_loss(t, out, np.zeros((1, 2)))
        t.backward(loss)
        # dL/dq = 2q/2 = q elementwise, copied verbatim to x
        assert np.allclose(x.grad, out.data)


class TestFanOut:
    def test_gradient_accumulates_over_consumers(self):
        # y = x + x: dL/dx must double
        t = Tape()
        x = Var([[1.0, -2.0]])
        y = ad.add(t, x, x)
        loss = ad.mse_loss(t, y, np.zeros((1, 2)))
        t.backward(loss)
        expected = 2.0 * (2.0 * y.data / y.data.size)
        assert np.allclose(x.grad, expected)

    def test_weighted_sum(self):
        rng = np.random.default_rng(13)
        a, b = rand(rng, 3, 3), rand(rng, 3, 3)

        def build(t, v):
            la = ad.mse_loss(t, v["a"], np.zeros((3, 3)))
            lb = ad.mse_loss(t, v["b"], np.ones((3, 3)))
            return ad.weighted_sum(t, [la, lb], [0.3, 1.7])

        check_op_gradients(build, {"a": a, "b": b})


class TestDtypeSwitch:
    def test_float32_default_outside_context(self):
        with ad.using_dtype(np.float32):
            assert Var([1.0]).data.dtype == np.float32

    def test_float32_gradcheck_within_coarse_tolerance(self):
        # the production precision still passes the 1e-4 contract
        rng = np.random.default_rng(14)
        with ad.using_dtype(np.float32):
            errs = check_op_gradients(
                lambda t, v: ad.linear(t, v["x"], v["w"], v["b"]),
                {"x": rand(rng, 4, 3), "w": rand(rng, 3, 5), "b": rand(rng, 5)},
                eps=1e-2, tol=1e-4)
        assert max(errs.values()) < 1e-4
