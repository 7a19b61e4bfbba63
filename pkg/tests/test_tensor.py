"""Tensor substrate tests: DFT pair, complex inverse, one-sided Jacobi SVD."""

import numpy as np
import pytest

from oiqa.errors import InversionError, ShapeError, SizeError, SymmetryError
from oiqa.tensor import cinv, dft2, idft2, svd_small


def naive_dft2(x):
    """Direct O(n^4) per-channel DFT, the independent oracle."""
    c, h, w = x.shape
    out = np.zeros((c, h, w), dtype=np.complex128)
    for ch in range(c):
        for u in range(h):
            for v in range(w):
                acc = 0.0 + 0.0j
                for p in range(h):
                    for q in range(w):
                        acc += x[ch, p, q] * np.exp(-2j * np.pi * (u * p / h + v * q / w))
                out[ch, u, v] = acc
    return out


class TestDft2:
    def test_constant_image_concentrates_at_dc(self):
        x = np.ones((1, 4, 4))
        x_hat = dft2(x)
        assert abs(x_hat[0, 0, 0] - 16.0) < 1e-12
        rest = x_hat.copy()
        rest[0, 0, 0] = 0.0
        assert np.max(np.abs(rest)) < 1e-12

    def test_inversion_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 8, 8))
        assert np.max(np.abs(idft2(dft2(x)) - x)) < 1e-10

    def test_matches_direct_oracle(self):
        x = np.random.default_rng(1).normal(size=(2, 5, 6))
        np.testing.assert_allclose(dft2(x), naive_dft2(x), atol=1e-9)

    def test_parseval_unnormalized(self):
        x = np.random.default_rng(2).normal(size=(1, 6, 6))
        x_hat = naive_dft2(x)  # oracle side of the dual route
        assert abs(np.sum(np.abs(x_hat) ** 2) - 36 * np.sum(x * x)) < 1e-9 * np.sum(x * x) * 36
        x_hat_fast = dft2(x)
        lhs = np.sum(np.abs(x_hat_fast) ** 2)
        rhs = 36 * np.sum(x * x)
        assert abs(lhs - rhs) / rhs < 1e-9

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(2, 1, 7, 5))
        a, b = 1.7, -0.3
        lhs = dft2(a * x + b * y)
        rhs = a * dft2(x) + b * dft2(y)
        scale = np.max(np.abs(rhs))
        assert np.max(np.abs(lhs - rhs)) / scale < 1e-10

    def test_complex_input_is_type_error(self):
        with pytest.raises(TypeError):
            dft2(np.ones((1, 4, 4), dtype=np.complex128))

    def test_wrong_rank_is_shape_error(self):
        with pytest.raises(ShapeError):
            dft2(np.ones((4, 4)))


class TestIdft2:
    def test_round_trip(self):
        x = np.random.default_rng(4).normal(size=(3, 6, 6))
        np.testing.assert_allclose(idft2(dft2(x)), x, atol=1e-12)

    def test_asymmetric_bin_raises(self):
        x_hat = np.zeros((1, 4, 4), dtype=np.complex128)
        x_hat[0, 0, 1] = 1.0 + 0.0j
        with pytest.raises(SymmetryError):
            idft2(x_hat)

    def test_zero_tensor(self):
        out = idft2(np.zeros((2, 4, 4), dtype=np.complex128))
        assert np.all(out == 0.0)


class TestCinv:
    def test_identity(self):
        np.testing.assert_allclose(cinv(np.eye(3)), np.eye(3), atol=1e-12)

    def test_diagonal(self):
        inv = cinv(np.diag([2.0, 4.0]))
        np.testing.assert_allclose(inv, np.diag([0.5, 0.25]), atol=1e-12)

    def test_hand_2x2(self):
        m = np.array([[1.0, 1.0], [-1.0, 1.0]])
        expected = 0.5 * np.array([[1.0, -1.0], [1.0, 1.0]])
        np.testing.assert_allclose(cinv(m), expected, atol=1e-12)

    def test_product_is_identity(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
        np.testing.assert_allclose(m @ cinv(m), np.eye(6), atol=1e-9)

    def test_singular_raises_with_condition(self):
        m = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(InversionError):
            cinv(m)

    def test_non_square_raises(self):
        with pytest.raises(ShapeError):
            cinv(np.ones((2, 3)))


class TestSvdSmall:
    def test_diagonal(self):
        s, v = svd_small(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(s, [3.0, 1.0])
        assert abs(abs(v[0, 0]) - 1.0) < 1e-12

    def test_orthogonal_input_has_unit_spectrum(self):
        rng = np.random.default_rng(6)
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        s, _ = svd_small(q)
        assert np.max(np.abs(s - 1.0)) < 1e-8

    def test_reconstruction_5x3(self):
        m = np.random.default_rng(7).normal(size=(5, 3))
        s, v = svd_small(m)
        u = (m @ v) / s
        assert np.linalg.norm((u * s) @ v.T - m) < 1e-8

    def test_wide_matrix(self):
        m = np.random.default_rng(8).normal(size=(3, 7))
        s, v = svd_small(m)
        np.testing.assert_allclose(np.linalg.norm(m @ v, axis=0), s, atol=1e-10)
        np.testing.assert_allclose(v.T @ v, np.eye(3), atol=1e-8)

    def test_values_sorted_descending(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            s, _ = svd_small(rng.normal(size=(6, 6)))
            assert np.all(np.diff(s) <= 1e-14)

    def test_prescribed_spectrum_recovered(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            n = int(rng.integers(2, 7))
            target = np.sort(rng.uniform(0.1, 5.0, size=n))[::-1]
            qu, _ = np.linalg.qr(rng.normal(size=(n + 2, n)))
            qv, _ = np.linalg.qr(rng.normal(size=(n, n)))
            m = (qu * target) @ qv.T
            s, _ = svd_small(m)
            assert np.max(np.abs(s - target)) < 1e-8

    def test_complex_matches_lapack(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))
        s, v = svd_small(m)
        np.testing.assert_allclose(s, np.linalg.svd(m, compute_uv=False), atol=1e-10)
        np.testing.assert_allclose(v.conj().T @ v, np.eye(4), atol=1e-8)
        np.testing.assert_allclose(np.linalg.norm(m @ v, axis=0), s, atol=1e-10)

    def test_dimension_cap(self):
        with pytest.raises(SizeError):
            svd_small(np.zeros((4097, 2)))

    def test_zero_matrix(self):
        s, v = svd_small(np.zeros((4, 3)))
        assert np.all(s == 0.0)
        np.testing.assert_allclose(v.T @ v, np.eye(3), atol=1e-12)
