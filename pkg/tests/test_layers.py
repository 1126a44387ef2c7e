import numpy as np
import pytest

from exuseg import layers as L
from exuseg.errors import ShapeError
from exuseg.gradcheck import LAYER_TOL, check_standalone_layers
from exuseg.tensor import Rng

from oracles import (
    conv2d_backward_loops,
    conv2d_forward_loops,
    maxpool2d_backward_loops,
    maxpool2d_forward_loops,
)


def rel(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / scale


class TestConv2d:
    def test_all_ones_hand_count(self):
        conv = L.Conv2d(1, 1)
        conv.weight = np.ones((3, 3, 1, 1))
        conv.bias = np.zeros(1)
        out = conv.forward(np.ones((1, 3, 3, 1)), training=False)[0, :, :, 0]
        # zero padding: corners see 4 inputs, edges 6, center all 9
        assert out[1, 1] == 9
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
        assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6

    def test_identity_kernel(self):
        conv = L.Conv2d(2, 2)
        w = np.zeros((3, 3, 2, 2))
        w[1, 1, 0, 0] = 1.0
        w[1, 1, 1, 1] = 1.0
        conv.weight = w
        conv.bias = np.zeros(2)
        x = Rng(0).uniform((2, 6, 6, 2))
        assert np.array_equal(conv.forward(x, training=False), x)

    def test_matches_loop_oracle(self):
        rng = Rng(21)
        conv = L.Conv2d(2, 3)
        conv.init_params(rng.split("init"))
        x = rng.split("x").normal((1, 5, 5, 2))
        out = conv.forward(x, training=True)
        expect = conv2d_forward_loops(x, conv.weight, conv.bias)
        assert rel(out, expect) < 1e-12

        grad_out = rng.split("g").normal(out.shape)
        grad_x = conv.backward(grad_out)
        ox, ow, ob = conv2d_backward_loops(x, conv.weight, grad_out)
        assert rel(grad_x, ox) < 1e-12
        assert rel(conv.grads["weight"], ow) < 1e-12
        assert rel(conv.grads["bias"], ob) < 1e-12

    def test_channel_mismatch(self):
        conv = L.Conv2d(3, 4)
        conv.init_params(Rng(1))
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((1, 4, 4, 2)), training=False)

    def test_kernel_validation(self):
        with pytest.raises(ValueError):
            L.Conv2d(1, 1, kernel_size=2)
        with pytest.raises(ValueError):
            L.Conv2d(0, 1)


class TestBatchNorm2d:
    def test_normalizes_per_channel(self):
        bn = L.BatchNorm2d(3)
        bn.init_params(Rng(0))
        x = Rng(2).normal((4, 5, 5, 3), mean=7.0, stddev=2.5)
        out = bn.forward(x, training=True)
        assert np.abs(out.mean(axis=(0, 1, 2))).max() < 1e-9
        assert np.abs(out.var(axis=(0, 1, 2)) - 1.0).max() < 1e-4

    def test_affine_output(self):
        bn = L.BatchNorm2d(2)
        bn.init_params(Rng(0))
        bn.gamma[...] = 2.0
        bn.beta[...] = 3.0
        x = Rng(3).normal((8, 4, 4, 2))
        out = bn.forward(x, training=True)
        x_hat = (x - x.mean(axis=(0, 1, 2))) / np.sqrt(x.var(axis=(0, 1, 2)) + bn.eps)
        assert rel(out, 2.0 * x_hat + 3.0) < 1e-12

    def test_running_stats_update(self):
        bn = L.BatchNorm2d(1)
        bn.init_params(Rng(0))
        x = Rng(4).normal((4, 4, 4, 1), mean=5.0, stddev=3.0)
        bn.forward(x, training=True)
        expect_mean = 0.9 * 0.0 + 0.1 * x.mean()
        expect_var = 0.9 * 1.0 + 0.1 * x.var()
        assert np.isclose(bn.running_mean[0], expect_mean, rtol=1e-12)
        assert np.isclose(bn.running_var[0], expect_var, rtol=1e-12)

    def test_infer_uses_running_stats(self):
        bn = L.BatchNorm2d(2)
        bn.init_params(Rng(0))
        bn.running_mean[...] = [1.0, -1.0]
        bn.running_var[...] = [4.0, 0.25]
        x = Rng(5).normal((2, 3, 3, 2))
        out = bn.forward(x, training=False)
        expect = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        assert rel(out, expect) < 1e-12
        assert bn.cache is None

    def test_degenerate_batch_raises(self):
        bn = L.BatchNorm2d(3)
        bn.init_params(Rng(0))
        with pytest.raises(ShapeError):
            bn.forward(np.zeros((1, 1, 1, 3)), training=True)


class TestReLU:
    def test_forward(self):
        out = L.ReLU().forward(np.array([[-1.0, 0.0, 2.0]]), training=False)
        assert np.array_equal(out, [[0.0, 0.0, 2.0]])

    def test_nonnegative_identity(self):
        x = Rng(1).uniform((3, 4), 0, 5)
        assert np.array_equal(L.ReLU().forward(x, training=False), x)

    def test_backward_subgradient(self):
        relu = L.ReLU()
        relu.forward(np.array([[-1.0, 0.0, 2.0]]), training=True)
        grad = relu.backward(np.array([[10.0, 10.0, 10.0]]))
        assert np.array_equal(grad, [[0.0, 0.0, 10.0]])


class TestMaxPool2d:
    def test_single_window(self):
        pool = L.MaxPool2d()
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out = pool.forward(x, training=True)
        assert out.reshape(()) == 4.0
        grad = pool.backward(np.ones((1, 1, 1, 1)))
        assert np.array_equal(grad.reshape(2, 2), [[0, 0], [0, 1]])

    def test_tie_routes_to_first_row_major(self):
        pool = L.MaxPool2d()
        x = np.ones((1, 4, 4, 1))
        out = pool.forward(x, training=True)
        assert np.array_equal(out, np.ones((1, 2, 2, 1)))
        grad = pool.backward(np.ones((1, 2, 2, 1)))[0, :, :, 0]
        expect = np.zeros((4, 4))
        expect[0::2, 0::2] = 1.0  # top-left of each window
        assert np.array_equal(grad, expect)

    def test_matches_window_scan_oracle(self):
        rng = Rng(31)
        x = rng.split("x").normal((1, 8, 8, 4))
        pool = L.MaxPool2d()
        out = pool.forward(x, training=True)
        assert np.array_equal(out, maxpool2d_forward_loops(x))
        grad_out = rng.split("g").normal(out.shape)
        grad = pool.backward(grad_out)
        assert np.array_equal(grad, maxpool2d_backward_loops(x, grad_out))

    def test_odd_extent_raises(self):
        with pytest.raises(ShapeError):
            L.MaxPool2d().forward(np.zeros((1, 5, 4, 1)), training=False)


class TestDropout:
    def test_p_zero_is_identity(self):
        x = Rng(1).normal((4, 4))
        drop = L.Dropout(0.0)
        assert np.array_equal(drop.forward(x, training=True, rng=Rng(2)), x)
        assert np.array_equal(drop.forward(x, training=False), x)

    def test_infer_is_identity_for_any_p(self):
        x = Rng(1).normal((4, 4))
        assert np.array_equal(L.Dropout(0.9).forward(x, training=False), x)

    def test_inverted_scaling_is_unbiased(self):
        x = np.ones(100_000)
        out = L.Dropout(0.5).forward(x, training=True, rng=Rng(6))
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.02

    def test_backward_uses_same_mask(self):
        drop = L.Dropout(0.5)
        x = np.ones((10, 10))
        out = drop.forward(x, training=True, rng=Rng(7))
        grad = drop.backward(np.ones((10, 10)))
        assert np.array_equal(grad, out)  # forward of ones == the mask

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            L.Dropout(1.0)
        with pytest.raises(ValueError):
            L.Dropout(-0.1)

    def test_training_requires_rng(self):
        with pytest.raises(ValueError):
            L.Dropout(0.5).forward(np.ones((2, 2)), training=True)


class TestDense:
    def test_identity_weight(self):
        dense = L.Dense(3, 3)
        dense.weight = np.eye(3)
        dense.bias = np.zeros(3)
        x = Rng(1).normal((4, 3))
        assert np.array_equal(dense.forward(x, training=False), x)

    def test_affine_example(self):
        dense = L.Dense(2, 2)
        dense.weight = np.eye(2)
        dense.bias = np.array([1.0, 1.0])
        out = dense.forward(np.array([[1.0, 2.0]]), training=False)
        assert np.array_equal(out, [[2.0, 3.0]])

    def test_width_mismatch(self):
        dense = L.Dense(4, 2)
        dense.init_params(Rng(1))
        with pytest.raises(ShapeError):
            dense.forward(np.zeros((2, 5)), training=False)


class TestInitialization:
    def test_he_stddev_dense(self):
        dense = L.Dense(2048, 2)
        dense.init_params(Rng(42))
        target = np.sqrt(2.0 / 2048)
        assert abs(dense.weight.std() - target) / target < 0.2
        assert np.array_equal(dense.bias, np.zeros(2))

    def test_he_stddev_conv(self):
        conv = L.Conv2d(64, 64)
        conv.init_params(Rng(42))
        target = np.sqrt(2.0 / (9 * 64))
        assert abs(conv.weight.std() - target) / target < 0.2
        assert np.array_equal(conv.bias, np.zeros(64))

    def test_batchnorm_defaults(self):
        bn = L.BatchNorm2d(5)
        bn.init_params(Rng(0))
        assert np.array_equal(bn.gamma, np.ones(5))
        assert np.array_equal(bn.beta, np.zeros(5))
        assert np.array_equal(bn.running_mean, np.zeros(5))
        assert np.array_equal(bn.running_var, np.ones(5))

    def test_same_seed_identical(self):
        a = L.Conv2d(3, 8)
        b = L.Conv2d(3, 8)
        a.init_params(Rng(9))
        b.init_params(Rng(9))
        assert np.array_equal(a.weight, b.weight)


class TestCacheDiscipline:
    def test_backward_without_forward_raises(self):
        conv = L.Conv2d(1, 1)
        conv.init_params(Rng(0))
        with pytest.raises(RuntimeError):
            conv.backward(np.zeros((1, 2, 2, 1)))

    def test_infer_forward_clears_cache(self):
        conv = L.Conv2d(1, 1)
        conv.init_params(Rng(0))
        x = np.ones((1, 2, 2, 1))
        conv.forward(x, training=True)
        assert conv.cache is not None
        conv.forward(x, training=False)
        assert conv.cache is None
        with pytest.raises(RuntimeError):
            conv.backward(np.zeros((1, 2, 2, 1)))


def test_every_layer_passes_finite_differences():
    results = check_standalone_layers(seed=7)
    names = {r.name.split(".")[0] for r in results}
    assert names == {"conv2d", "batchnorm2d", "relu", "maxpool2d",
                     "dropout", "flatten", "dense"}
    for res in results:
        assert res.error < LAYER_TOL, f"{res.name}: {res.error}"
