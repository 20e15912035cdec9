"""Forward semantics of the tensor kernel ops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3snet import tensor as T
from m3snet.tensor import DimensionError, Tensor, UsageError


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3, 4), dtype=np.float32))
    assert t.shape == (2, 3, 4)
    assert t.size == 24
    assert t.dtype == np.float32
    # float64 passes through (gradient-check precision), ints are cast
    assert Tensor(np.zeros(3)).dtype == np.float64
    assert Tensor(np.arange(3)).dtype == np.float32


class TestConv2d:
    def test_all_ones_center(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, padding=1)
        assert out.data[0, 0, 1, 1] == pytest.approx(9.0)
        # corners only see a 2x2 neighborhood
        assert out.data[0, 0, 0, 0] == pytest.approx(4.0)

    def test_identity_kernel(self, rng):
        x = Tensor(rng.random((2, 3, 5, 5)).astype(np.float32))
        w = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
        b = Tensor(np.zeros(3, dtype=np.float32))
        out = T.conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_groups_equal_blockdiagonal(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        wg = rng.standard_normal((8, 1, 3, 3)).astype(np.float32)
        bias = Tensor(rng.standard_normal(8).astype(np.float32))
        grouped = T.conv2d(x, Tensor(wg), bias, padding=1, groups=4)
        dense = np.zeros((8, 4, 3, 3), dtype=np.float32)
        for g in range(4):  # embed each group on the block diagonal
            dense[2 * g:2 * (g + 1), g] = wg[2 * g:2 * (g + 1), 0]
        full = T.conv2d(x, Tensor(dense), bias, padding=1, groups=1)
        np.testing.assert_allclose(grouped.data, full.data, atol=1e-6)

    def test_depthwise_equals_per_channel(self, rng):
        x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 1, 3, 3)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(w), padding=1, groups=4)
        for c in range(4):
            single = T.conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1]), padding=1)
            np.testing.assert_allclose(out.data[:, c], single.data[:, 0], atol=1e-6)

    def test_output_size_law(self, rng):
        x = Tensor(rng.random((1, 2, 11, 9)).astype(np.float32))
        w = Tensor(rng.random((3, 2, 3, 3)).astype(np.float32))
        out = T.conv2d(x, w, stride=2, padding=1)
        assert out.shape == (1, 3, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_shape_errors_name_axes(self, rng):
        x = Tensor(np.zeros((1, 4, 5, 5)))
        with pytest.raises(DimensionError, match="groups"):
            T.conv2d(x, Tensor(np.zeros((4, 4, 3, 3))), groups=3)
        with pytest.raises(DimensionError, match="in-channel"):
            T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))))
        with pytest.raises(DimensionError, match="bias"):
            T.conv2d(x, Tensor(np.zeros((4, 4, 1, 1))), Tensor(np.zeros(5)))


class TestLayerNorm:
    def test_constant_input_zeroed(self):
        x = Tensor(np.full((1, 4, 2, 2), 3.7, dtype=np.float32))
        out = T.layer_norm_channel(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_two_channel_values(self):
        x = Tensor(np.array([1.0, 3.0], dtype=np.float64).reshape(1, 2, 1, 1))
        out = T.layer_norm_channel(x, Tensor(np.ones(2), dtype=np.float64),
                                   Tensor(np.zeros(2), dtype=np.float64), eps=1e-12)
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)

    def test_normalizes_every_pixel(self, rng):
        x = Tensor(rng.standard_normal((2, 8, 5, 5)))
        out = T.layer_norm_channel(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        mu = out.data.mean(axis=1)
        var = out.data.var(axis=1)
        assert np.abs(mu).max() < 1e-6
        np.testing.assert_allclose(var, 1.0, atol=1e-3)

    def test_wrong_affine_length(self):
        x = Tensor(np.zeros((1, 4, 2, 2)))
        with pytest.raises(DimensionError, match="channel axis"):
            T.layer_norm_channel(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestElementwiseAndSoftmax:
    def test_softmax_uniform(self):
        out = T.softmax_lastdim(Tensor(np.zeros((3,))))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-7)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_softmax_rows_normalized(self, seed):
        g = np.random.default_rng(seed)
        x = g.standard_normal((2, 3, 5)) * g.uniform(0.1, 20)
        out = T.softmax_lastdim(Tensor(x)).data
        assert out.min() >= 0.0
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_broadcast_error(self):
        with pytest.raises(DimensionError, match="broadcastable"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_matmul_batch_mismatch(self):
        with pytest.raises(DimensionError, match="batch dims"):
            T.matmul_batched(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))


class TestPooling:
    def test_global_pool_constant(self):
        x = Tensor(np.full((2, 3, 4, 5), 2.5, dtype=np.float32))
        out = T.adaptive_avg_pool_to_1(x)
        assert out.shape == (2, 3, 1, 1)
        np.testing.assert_allclose(out.data, 2.5, atol=1e-7)

    def test_local_pool_window_covers_image(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 7)))
        local = T.local_avg_pool(x, 7).data
        globl = T.adaptive_avg_pool_to_1(x).data
        np.testing.assert_allclose(local, np.broadcast_to(globl, local.shape), atol=1e-6)

    def test_local_pool_matches_bruteforce(self, rng):
        # oracle: explicit per-pixel loop over clamped fixed-size windows
        x = rng.standard_normal((1, 2, 6, 5))
        window = 3
        out = T.local_avg_pool(Tensor(x), window).data
        h, w = 6, 5
        for i in range(h):
            for j in range(w):
                r = min(max(i - 1, 0), h - window)
                c = min(max(j - 1, 0), w - window)
                ref = x[:, :, r:r + window, c:c + window].mean(axis=(2, 3))
                np.testing.assert_allclose(out[:, :, i, j], ref, atol=1e-6)

    def test_local_pool_is_adjoint_consistent(self, rng):
        # <A x, y> == <x, A' y> pins the backward as the exact transpose
        x = T.Tensor(rng.standard_normal((1, 1, 6, 7)), requires_grad=True, dtype=np.float64)
        y = rng.standard_normal((1, 1, 6, 7))
        out = T.local_avg_pool(x, 4)
        T.backward(T.tsum(T.mul(out, T.Tensor(y))))
        lhs = float((out.data * y).sum())
        rhs = float((x.data * x.grad).sum())
        # A is linear: <Ax, y> = <x, A'y> and grad = A'y
        assert lhs == pytest.approx(rhs, rel=1e-10)


class TestRearrange:
    def test_pixel_shuffle_inverse_roundtrip(self, rng):
        x = Tensor(rng.standard_normal((2, 8, 3, 5)).astype(np.float32))
        back = T.pixel_unshuffle(T.pixel_shuffle(x, 2), 2)
        np.testing.assert_array_equal(back.data, x.data)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_pixel_shuffle_preserves_multiset(self, seed):
        g = np.random.default_rng(seed)
        x = g.standard_normal((1, 4, 2, 3)).astype(np.float32)
        out = T.pixel_shuffle(Tensor(x), 2)
        assert out.shape == (1, 1, 4, 6)
        np.testing.assert_array_equal(np.sort(out.data.ravel()), np.sort(x.ravel()))

    def test_split_halves(self, rng):
        x = rng.standard_normal((2, 6, 3, 3)).astype(np.float32)
        a, b = T.split_channels_half(Tensor(x))
        np.testing.assert_array_equal(a.data, x[:, :3])
        np.testing.assert_array_equal(b.data, x[:, 3:])

    def test_split_odd_channels(self):
        with pytest.raises(DimensionError, match="even"):
            T.split_channels_half(Tensor(np.zeros((1, 5, 2, 2))))

    def test_reflect_pad_matches_numpy(self, rng):
        x = rng.standard_normal((1, 2, 5, 4)).astype(np.float32)
        out = T.reflect_pad2d(Tensor(x), (1, 2, 3, 0))
        ref = np.pad(x, ((0, 0), (0, 0), (1, 2), (3, 0)), mode="reflect")
        np.testing.assert_array_equal(out.data, ref)


class TestBackwardBasics:
    def test_sum_gradient_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_square_gradient(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_fanout_accumulates(self, rng):
        x = Tensor(rng.standard_normal((4,)), requires_grad=True)
        y = T.add(T.mul(x, x), T.scale(x, 3.0))  # x^2 + 3x
        T.backward(T.tsum(y))
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, rtol=1e-6)

    def test_backward_detached_errors(self):
        with pytest.raises(UsageError, match="detached"):
            T.backward(Tensor(np.zeros(())))

    def test_backward_nonscalar_errors(self, rng):
        x = Tensor(rng.standard_normal((3,)), requires_grad=True)
        with pytest.raises(UsageError, match="scalar"):
            T.backward(T.mul(x, x))

    def test_no_grad_suppresses_recording(self, rng):
        x = Tensor(rng.standard_normal((3,)), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert y.op is None and not y.requires_grad
