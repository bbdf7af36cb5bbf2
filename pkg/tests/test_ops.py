import numpy as np
import pytest

from pancraft import ops
from pancraft import tensor as T

from fdcheck import check_op, weighted_sum

# measured once on the seeded input below and kept as a regression value;
# uniform white noise is the worst case for an interpolating up-sampler, so
# the round trip is bounded but not exact
BICUBIC_ROUNDTRIP_MAX_ABS = 0.19581566


class TestConv2d:
    def test_identity_kernel(self):
        x = T.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = T.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = T.Tensor(np.zeros(1, dtype=np.float32))
        out = ops.conv2d(x, w, b)
        assert np.array_equal(out.data, x.data)

    def test_output_size_formula(self):
        x = T.Tensor(np.zeros((1, 1, 8, 8)))
        w = T.Tensor(np.zeros((2, 1, 3, 3)))
        b = T.Tensor(np.zeros(2))
        out = ops.conv2d(x, w, b, stride=2, pad=1)
        assert out.shape == (1, 2, 4, 4)

    def test_channel_mismatch_is_hard_error(self):
        x = T.Tensor(np.zeros((1, 3, 4, 4)))
        w = T.Tensor(np.zeros((2, 2, 3, 3)))
        with pytest.raises(ValueError):
            ops.conv2d(x, w, T.Tensor(np.zeros(2)))

    def test_degenerate_extent_is_hard_error(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)))
        w = T.Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ValueError):
            ops.conv2d(x, w, T.Tensor(np.zeros(1)), pad=0)

    def test_even_kernel_rejected(self):
        x = T.Tensor(np.zeros((1, 1, 4, 4)))
        w = T.Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            ops.conv2d(x, w, T.Tensor(np.zeros(1)))

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        err = check_op(lambda a, k, c: T.tsum(ops.conv2d(a, k, c)), [x, w, b])
        assert err < 1e-6

    def test_strided_gradients(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        err = check_op(lambda a, k, c: weighted_sum(ops.conv2d(a, k, c, stride=2, pad=1)),
                       [x, w, b])
        assert err < 1e-5

    def test_pointwise_gradients(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 4, 4))
        w = rng.standard_normal((5, 3, 1, 1))
        b = rng.standard_normal(5)
        err = check_op(lambda a, k, c: weighted_sum(ops.conv2d(a, k, c)), [x, w, b])
        assert err < 1e-5


class TestLayerNorm:
    def test_constant_input_maps_to_zero(self):
        x = T.Tensor(np.full((2, 3, 4, 4), 5.0, dtype=np.float32))
        out = ops.layer_norm(x, T.Tensor(np.ones(3, dtype=np.float32)),
                             T.Tensor(np.zeros(3, dtype=np.float32)), 1e-5)
        assert np.array_equal(out.data, np.zeros_like(x.data))

    def test_zero_scale_returns_shift(self):
        rng = np.random.default_rng(4)
        x = T.Tensor(rng.standard_normal((1, 4, 3, 3)))
        out = ops.layer_norm(x, T.Tensor(np.zeros(4)), T.Tensor(np.full(4, 7.0)), 1e-5)
        assert np.array_equal(out.data, np.full_like(x.data, 7.0))

    def test_normalizes_channel_vectors(self):
        rng = np.random.default_rng(5)
        x = T.Tensor(rng.standard_normal((2, 8, 3, 3)))
        out = ops.layer_norm(x, T.Tensor(np.ones(8)), T.Tensor(np.zeros(8)), 1e-12)
        assert np.allclose(out.data.mean(axis=1), 0, atol=1e-9)
        assert np.allclose(out.data.var(axis=1), 1, atol=1e-6)

    def test_channel_mismatch_is_hard_error(self):
        x = T.Tensor(np.zeros((1, 3, 2, 2)))
        with pytest.raises(ValueError):
            ops.layer_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), 1e-5)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 4, 3, 3))
        gamma = rng.standard_normal(4)
        beta = rng.standard_normal(4)
        err = check_op(lambda a, g, b: weighted_sum(ops.layer_norm(a, g, b, 1e-5)),
                       [x, gamma, beta])
        assert err < 1e-6


class TestSoftmaxLastDims:
    def test_uniform_scores(self):
        x = T.Tensor(np.zeros((2, 5, 3, 3)))
        out = ops.softmax_lastdims(x)
        assert np.allclose(out.data, 1.0 / 9.0)

    def test_closed_form_two_entries(self):
        x = T.Tensor(np.array([[[0.0, np.log(3.0)]]]))
        out = ops.softmax_lastdims(x)
        assert np.allclose(out.data, [[[0.25, 0.75]]], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 3, 3)).astype(np.float32)
        a = ops.softmax_lastdims(T.Tensor(x))
        b = ops.softmax_lastdims(T.Tensor(x + 13.5))
        assert np.allclose(a.data, b.data, atol=1e-6)

    def test_sums_to_one(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 4, 4, 5, 5))
        out = ops.softmax_lastdims(T.Tensor(x))
        assert np.allclose(out.data.sum(axis=(-2, -1)), 1.0, atol=1e-6)

    def test_minus_inf_scores_get_zero_weight(self):
        x = np.zeros((1, 2, 2))
        x[0, 1, 1] = -np.inf
        out = ops.softmax_lastdims(T.Tensor(x))
        assert out.data[0, 1, 1] == 0.0
        assert np.allclose(out.data.sum(), 1.0)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 3, 3, 3))
        err = check_op(lambda a: weighted_sum(ops.softmax_lastdims(a)), [x])
        assert err < 1e-5


class TestUnfold:
    def test_center_tap_is_input(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((1, 2, 4, 4))
        win = ops.unfold_windows(T.Tensor(x), 3)
        assert np.array_equal(win.data[..., 1, 1], x)

    def test_border_neighbors_zero(self):
        x = np.ones((1, 1, 3, 3))
        win = ops.unfold_windows(T.Tensor(x), 3)
        assert win.data[0, 0, 0, 0, 0, 0] == 0.0  # up-left of the corner

    def test_gradients(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 2, 4, 4))
        err = check_op(lambda a: weighted_sum(ops.unfold_windows(a, 3)), [x])
        assert err < 1e-5


class TestResample:
    @pytest.mark.parametrize("factor,method", [
        (4, "bicubic"), (4, "bilinear"), (2, "nearest"),
        ((1, 2), "avgpool"), ((1, 4), "bicubic"), ((3, 2), "bilinear"),
    ])
    def test_constant_preserved(self, factor, method):
        x = T.Tensor(np.full((1, 2, 8, 8), 0.37))
        out = ops.resample(x, factor, method)
        f = factor if isinstance(factor, tuple) else (factor, 1)
        assert out.shape[2] == 8 * f[0] // f[1]
        assert np.allclose(out.data, 0.37, atol=1e-12)

    def test_avgpool_mean_definition(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = ops.resample(x, (1, 2), "avgpool")
        assert out.data.reshape(()) == 2.5

    def test_indivisible_extent_is_hard_error(self):
        x = T.Tensor(np.zeros((1, 1, 6, 6)))
        with pytest.raises(ValueError):
            ops.resample(x, (1, 4), "avgpool")

    def test_avgpool_rejects_upscaling(self):
        with pytest.raises(ValueError):
            ops.resample(T.Tensor(np.zeros((1, 1, 4, 4))), 2, "avgpool")

    def test_nearest_repeats(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = ops.resample(x, 2, "nearest")
        assert np.array_equal(out.data[0, 0], np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float64))

    def test_bicubic_roundtrip_regression(self):
        # up x4 then avgpool x1/4 on a seeded random 8x8; anti-aliasing makes
        # this inexact, the bound is a frozen measurement
        rng = np.random.default_rng(2025)
        x = rng.random((1, 1, 8, 8))
        up = ops.resample(T.Tensor(x), 4, "bicubic")
        back = ops.resample(up, (1, 4), "avgpool")
        err = np.max(np.abs(back.data - x))
        assert err == pytest.approx(BICUBIC_ROUNDTRIP_MAX_ABS, abs=1e-7)

    @pytest.mark.parametrize("factor,method", [
        (2, "nearest"), ((1, 2), "nearest"), ((1, 2), "avgpool"),
        (2, "bilinear"), ((1, 2), "bilinear"), (4, "bicubic"), ((1, 2), "bicubic"),
    ])
    def test_gradients(self, factor, method):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, 2, 4, 4))
        err = check_op(lambda a: weighted_sum(ops.resample(a, factor, method)), [x])
        assert err < 1e-5
