"""
TensorFact - Tensor Primitive Tests
"""

import os
import sys

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.errors import ArgumentError, NumericError, ShapeError
from src.tensor_core import (
    ConvGeometry,
    check_finite,
    compose_factors,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    flatten_from_kernel,
    p_norm,
    reshape_to_kernel,
)


def naive_conv(k, x, stride, padding):
    """Direct nested-loop cross-correlation."""
    t_size, s_size, d2_size, d1_size = k.shape
    n_size, _, height, width = x.shape
    out_h = (height + 2 * padding - d2_size) // stride + 1
    out_w = (width + 2 * padding - d1_size) // stride + 1
    y = np.zeros((n_size, t_size, out_h, out_w))
    for n in range(n_size):
        for t in range(t_size):
            for i in range(out_h):
                for j in range(out_w):
                    total = 0.0
                    for s in range(s_size):
                        for a in range(d2_size):
                            for b in range(d1_size):
                                row = i * stride + a - padding
                                col = j * stride + b - padding
                                if 0 <= row < height and 0 <= col < width:
                                    total += k[t, s, a, b] * x[n, s, row, col]
                    y[n, t, i, j] = total
    return y


class TestFactorsAndReshape:
    """Test factor composition and the matrix/kernel rearrangement."""

    def test_compose_hand_example(self):
        """Test the 3x2 by 2x2 product."""
        a = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(compose_factors(a, b), [[1, 2], [3, 4], [4, 6]])

    def test_compose_zero_annihilates(self):
        """Test that a zero right factor gives a zero matrix."""
        a = np.random.default_rng(0).normal(size=(5, 2))
        assert not compose_factors(a, np.zeros((2, 3))).any()

    def test_compose_matches_triple_loop(self):
        """Test composition against an element-by-element loop."""
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(3, 4))
        expected = np.zeros((6, 4))
        for p in range(6):
            for q in range(4):
                for c in range(3):
                    expected[p, q] += a[p, c] * b[c, q]
        np.testing.assert_allclose(compose_factors(a, b), expected, rtol=1e-6)

    def test_compose_is_bilinear(self):
        """Test scaling the left factor scales the product."""
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 2)), rng.normal(size=(2, 5))
        np.testing.assert_allclose(compose_factors(3.5 * a, b), 3.5 * compose_factors(a, b), rtol=1e-6)

    def test_compose_shape_mismatch(self):
        """Test incompatible factors raise a shape error."""
        with pytest.raises(ShapeError):
            compose_factors(np.ones((3, 2)), np.ones((3, 2)))

    def test_reshape_index_mapping(self):
        """Test K[t, s, d2, d1] picks M[t*S + s, d2*D1 + d1]."""
        m = np.arange(4.0).reshape(2, 2)
        k = reshape_to_kernel(m, 2, 1, 2, 1)
        assert k[1, 0, 0, 0] == m[1, 0]
        m = np.arange(12 * 9, dtype=float).reshape(12, 9)
        k = reshape_to_kernel(m, 4, 3, 3, 3)
        for t, s, a, b in [(0, 0, 0, 0), (3, 2, 2, 2), (1, 2, 0, 1), (2, 0, 1, 2)]:
            assert k[t, s, a, b] == m[t * 3 + s, a * 3 + b]

    def test_reshape_identity_case(self):
        """Test the 1x1x1x1 kernel."""
        assert reshape_to_kernel(np.array([[5.0]]), 1, 1, 1, 1)[0, 0, 0, 0] == 5.0
        np.testing.assert_array_equal(flatten_from_kernel(np.full((1, 1, 1, 1), 5.0)), [[5.0]])

    def test_round_trip_is_bitwise(self):
        """Test flatten after reshape returns the same bits."""
        m = np.random.default_rng(3).normal(size=(12, 9)).astype(np.float32)
        back = flatten_from_kernel(reshape_to_kernel(m, 4, 3, 3, 3))
        assert back.tobytes() == m.tobytes()

    def test_constant_filters_give_constant_rows(self):
        """Test structure preservation of flatten."""
        k = np.zeros((2, 3, 3, 3))
        for t in range(2):
            for s in range(3):
                k[t, s] = t * 10 + s
        m = flatten_from_kernel(k)
        assert all(len(set(row)) == 1 for row in m)

    def test_reshape_incompatible_dims(self):
        """Test a matrix that cannot hold the kernel."""
        with pytest.raises(ShapeError):
            reshape_to_kernel(np.ones((4, 4)), 2, 2, 3, 3)


class TestConvolution:
    """Test convolution and its adjoints."""

    def test_scalar_product(self):
        """Test a 1x1 kernel over a 1x1 input."""
        y = conv2d(np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), 3.0), ConvGeometry())
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 6.0

    def test_window_sum(self):
        """Test an all-ones 3x3 kernel over an all-ones 3x3 input."""
        y = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), ConvGeometry(1, 0, (3, 3)))
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 9.0

    def test_matches_naive_loop_with_padding(self):
        """Test a padded convolution against the loop oracle."""
        rng = np.random.default_rng(4)
        k, x = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(1, 3, 5, 5))
        np.testing.assert_allclose(conv2d(k, x, ConvGeometry(1, 1, (3, 3))), naive_conv(k, x, 1, 1),
                                   rtol=1e-5, atol=1e-10)

    @pytest.mark.parametrize("seed", range(8))
    def test_random_geometries_match_oracle(self, seed):
        """Test random small instances with strides and paddings."""
        rng = np.random.default_rng(100 + seed)
        n, t, s = rng.integers(1, 5, size=3)
        d2, d1 = rng.integers(1, 4, size=2)
        height, width = rng.integers(max(d2, 3), 9), rng.integers(max(d1, 3), 9)
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        k, x = rng.normal(size=(t, s, d2, d1)), rng.normal(size=(n, s, height, width))
        geom = ConvGeometry(stride, padding, (int(d2), int(d1)))
        np.testing.assert_allclose(conv2d(k, x, geom), naive_conv(k, x, stride, padding), rtol=1e-5, atol=1e-10)

    def test_linear_in_kernel(self):
        """Test conv(K1 + K2) equals conv(K1) + conv(K2)."""
        rng = np.random.default_rng(5)
        k1, k2 = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
        x = rng.normal(size=(2, 2, 6, 6))
        geom = ConvGeometry(1, 1, (3, 3))
        np.testing.assert_allclose(conv2d(k1 + k2, x, geom), conv2d(k1, x, geom) + conv2d(k2, x, geom),
                                   rtol=1e-5, atol=1e-10)

    def test_preserves_float32(self):
        """Test the default precision is kept."""
        k = np.ones((1, 1, 3, 3), dtype=np.float32)
        x = np.ones((1, 1, 4, 4), dtype=np.float32)
        assert conv2d(k, x, ConvGeometry(1, 1, (3, 3))).dtype == np.float32

    def test_channel_mismatch(self):
        """Test mismatched channels raise a shape error."""
        with pytest.raises(ShapeError):
            conv2d(np.ones((1, 2, 1, 1)), np.ones((1, 3, 2, 2)), ConvGeometry())

    def test_empty_output(self):
        """Test geometry producing no output raises a shape error."""
        with pytest.raises(ShapeError):
            conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), ConvGeometry(1, 0, (5, 5)))

    def test_invalid_geometry(self):
        """Test a zero stride is rejected."""
        with pytest.raises(ArgumentError):
            ConvGeometry(stride=0)

    def test_adjoints_satisfy_inner_product_identity(self):
        """Test <conv(K, X), G> equals <K, dK(G)> and <X, dX(G)>."""
        rng = np.random.default_rng(6)
        k, x = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(2, 2, 7, 7))
        geom = ConvGeometry(2, 1, (3, 3))
        y = conv2d(k, x, geom)
        g = rng.normal(size=y.shape)
        lhs = float(np.sum(y * g))
        assert np.isclose(lhs, float(np.sum(k * conv2d_weight_grad(g, x, geom))), rtol=1e-10)
        assert np.isclose(lhs, float(np.sum(x * conv2d_input_grad(g, k, geom, (7, 7)))), rtol=1e-10)

    def test_non_finite_raises(self):
        """Test NaN inputs raise a numeric error."""
        with pytest.raises(NumericError):
            check_finite(np.array([1.0, np.nan]))


class TestPNorm:
    """Test entrywise norms."""

    def test_zero_tensor(self):
        """Test both norms of zero."""
        assert p_norm(np.zeros((2, 2, 2, 2)), 1) == 0.0
        assert p_norm(np.zeros((2, 2, 2, 2)), 2) == 0.0

    def test_three_four_five(self):
        """Test the 3-4-5 triple."""
        assert p_norm(np.array([3.0, -4.0]), 2) == 5.0
        assert p_norm(np.array([3.0, -4.0]), 1) == 7.0

    def test_squared_l2_is_sum_of_squares(self):
        """Test ||T||_2^2 equals the sum of squares."""
        t = np.random.default_rng(7).normal(size=(2, 3, 4, 5))
        assert np.isclose(p_norm(t, 2) ** 2, np.sum(t ** 2), rtol=1e-6)

    def test_unsupported_order(self):
        """Test p = 3 is rejected."""
        with pytest.raises(ArgumentError):
            p_norm(np.ones(3), 3)


if __name__ == "__main__":
    pytest.main([__file__])
