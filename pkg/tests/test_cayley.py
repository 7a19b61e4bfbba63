"""Orthogonal-convolution tests: unitarity, isometry, block composition,
insertion bookkeeping, and exact gradients through the Cayley transform."""

import numpy as np
import pytest

from oiqa import net
from oiqa.cayley import (CayleyConvParams, cayley_orthogonalize, init_block_params,
                         insert_robust_block, make_block_spec, orth_conv_forward,
                         orth_conv_backward, _orth_conv_apply, robust_block_bound,
                         robust_block_forward, _robust_block_apply, robust_block_backward)
from oiqa.errors import ConfigurationError, ShapeError
from oiqa.net import build_toy_model, clone_without_layer, count_params, forward, infer_shapes
from oiqa.spectral import conv_spectrum


class TestCayleyOrthogonalize:
    def test_hermitian_input_gives_identity(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        herm = m + m.conj().T  # skew part vanishes
        np.testing.assert_allclose(cayley_orthogonalize(herm), np.eye(4), atol=1e-12)

    def test_hand_rotation(self):
        # W with skew part A = [[0, 1], [-1, 0]] maps to the 90-degree rotation
        q = cayley_orthogonalize(np.array([[0.0, 1.0], [0.0, 0.0]]))
        np.testing.assert_allclose(q.real, [[0.0, -1.0], [1.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(q.imag, 0.0, atol=1e-12)

    def test_random_complex_is_unitary(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        q = cayley_orthogonalize(w)
        assert np.max(np.abs(q.conj().T @ q - np.eye(4))) < 1e-9

    def test_residual_over_many_seeds(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            c = int(rng.integers(1, 9))
            w = rng.normal(size=(c, c)) + 1j * rng.normal(size=(c, c))
            q = cayley_orthogonalize(w)
            assert np.max(np.abs(q.conj().T @ q - np.eye(c))) < 1e-9


class TestOrthConvForward:
    def test_zero_kernel_is_identity(self):
        rng = np.random.default_rng(2)
        params = CayleyConvParams(np.zeros((3, 3, 3, 3)), 6, 3)
        x = rng.normal(size=(3, 6, 6))
        np.testing.assert_allclose(orth_conv_forward(params, x), x, atol=1e-12)

    def test_norm_preserved(self):
        rng = np.random.default_rng(3)
        params = CayleyConvParams(rng.normal(size=(4, 4, 3, 3)), 8, 4)
        x = rng.normal(size=(4, 8, 8))
        y = orth_conv_forward(params, x)
        assert abs(np.linalg.norm(y) - np.linalg.norm(x)) / np.linalg.norm(x) < 1e-8

    def test_perturbation_transport(self):
        rng = np.random.default_rng(4)
        params = CayleyConvParams(rng.normal(size=(2, 2, 3, 3)), 8, 2)
        x = rng.normal(size=(2, 8, 8))
        delta = rng.normal(size=(2, 8, 8))
        delta *= 0.01 / np.linalg.norm(delta)
        diff = orth_conv_forward(params, x + delta) - orth_conv_forward(params, x)
        assert abs(np.linalg.norm(diff) - 0.01) < 1e-8 * 0.01 + 1e-12

    def test_non_square_rejected(self):
        params = CayleyConvParams(np.zeros((2, 2, 3, 3)), 6, 2)
        with pytest.raises(ShapeError):
            orth_conv_forward(params, np.zeros((2, 6, 5)))

    def test_output_is_real_via_symmetry_gate(self):
        # real kernel => conjugate-symmetric frequency response => real output
        rng = np.random.default_rng(5)
        for seed in range(5):
            rng2 = np.random.default_rng(seed)
            params = CayleyConvParams(rng2.normal(size=(3, 3, 3, 3)), 7, 3)
            y = orth_conv_forward(params, rng.normal(size=(3, 7, 7)))
            assert np.isrealobj(y)

    def test_isometry_sweep(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            c = int(rng.integers(2, 9))
            n = int(rng.integers(3, 17))
            k = min(3, n)
            params = CayleyConvParams(rng.normal(size=(c, c, k, k)), n, c)
            x = rng.normal(size=(c, n, n))
            delta = rng.normal(size=(c, n, n))
            diff = orth_conv_forward(params, x + delta) - orth_conv_forward(params, x)
            rel = abs(np.linalg.norm(diff) - np.linalg.norm(delta)) / np.linalg.norm(delta)
            assert rel < 1e-8

    def test_kernel_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        c, n = 2, 5
        params = CayleyConvParams(rng.normal(size=(c, c, 3, 3)), n, c)
        x = rng.normal(size=(c, n, n))
        proj = rng.normal(size=(c, n, n))
        _, cache = _orth_conv_apply(params, x)
        gx, gk = orth_conv_backward(params, cache, proj)

        def objective(kernel, xx):
            return float(np.sum(proj * orth_conv_forward(
                CayleyConvParams(kernel, n, c), xx)))

        h = 1e-5
        it = np.nditer(params.kernel, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            kp = params.kernel.copy(); kp[idx] += h
            km = params.kernel.copy(); km[idx] -= h
            fd = (objective(kp, x) - objective(km, x)) / (2 * h)
            assert abs(fd - gk[idx]) / max(abs(fd), 1e-8) < 1e-4
            it.iternext()
        fd_x = np.zeros_like(x)
        xf = x.reshape(-1)
        for i in range(xf.size):
            xp = xf.copy(); xp[i] += h
            xm = xf.copy(); xm[i] -= h
            fd_x.reshape(-1)[i] = (objective(params.kernel, xp.reshape(x.shape))
                                   - objective(params.kernel, xm.reshape(x.shape))) / (2 * h)
        assert np.max(np.abs(fd_x - gx)) / np.max(np.abs(fd_x)) < 1e-4


class TestRobustBlock:
    def test_channel_select_composition(self):
        rng = np.random.default_rng(7)
        n = 6
        spec = make_block_spec(0, 2, n, n)
        reduce_w = np.zeros((1, 2, 1, 1))
        reduce_w[0, 0, 0, 0] = 1.0  # select channel 0
        kernel = rng.normal(size=(2, 2, 3, 3))
        x = rng.normal(size=(2, n, n))
        out = robust_block_forward(spec, reduce_w, kernel, x)
        assert out.shape == (2, n, n)
        assert abs(np.linalg.norm(out) - np.linalg.norm(x[0])) / np.linalg.norm(x[0]) < 1e-8

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(8)
        spec = make_block_spec(0, 4, 5, 5)
        rw, ck = init_block_params(spec, rng)
        out = robust_block_forward(spec, rw, ck, np.zeros((4, 5, 5)))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_amplification_bounded_by_reduce_conv_norm(self):
        rng = np.random.default_rng(9)
        spec = make_block_spec(0, 6, 8, 8)
        reduce_w = rng.normal(size=(3, 6, 1, 1))
        kernel = rng.normal(size=(6, 6, 3, 3))
        bound = robust_block_bound(reduce_w)
        # cross-check the bound against the 1x1 conv's circular spectrum
        assert abs(bound - conv_spectrum(reduce_w, 8, "circular").sigma1) < 1e-8
        x = rng.normal(size=(6, 8, 8))
        worst = 0.0
        for _ in range(50):
            delta = rng.normal(size=(6, 8, 8))
            diff = (robust_block_forward(spec, reduce_w, kernel, x + delta)
                    - robust_block_forward(spec, reduce_w, kernel, x))
            worst = max(worst, np.linalg.norm(diff) / np.linalg.norm(delta))
        assert worst <= bound + 1e-6

    def test_rectangular_input_pools_square(self):
        rng = np.random.default_rng(10)
        spec = make_block_spec(0, 4, 6, 9)
        rw, ck = init_block_params(spec, rng)
        out = robust_block_forward(spec, rw, ck, rng.normal(size=(4, 6, 9)))
        assert out.shape == (4, 6, 6)

    def test_single_channel_rejected(self):
        with pytest.raises(ConfigurationError):
            make_block_spec(0, 1, 4, 4)

    def test_block_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        spec = make_block_spec(0, 4, 5, 5)
        rw, ck = init_block_params(spec, rng)
        x = rng.normal(size=(4, 5, 5))
        proj = rng.normal(size=(4, 5, 5))
        out, cache = _robust_block_apply(spec, rw, ck, x)
        gx, g_rw, g_ck = robust_block_backward(spec, rw, ck, cache, proj)

        def objective(rw_, ck_, x_):
            return float(np.sum(proj * robust_block_forward(spec, rw_, ck_, x_)))

        h = 1e-5
        for arr, grad, name in ((rw, g_rw, "reduce"), (ck, g_ck, "cayley")):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                ap = arr.copy(); ap[idx] += h
                am = arr.copy(); am[idx] -= h
                if name == "reduce":
                    fd = (objective(ap, ck, x) - objective(am, ck, x)) / (2 * h)
                else:
                    fd = (objective(rw, ap, x) - objective(rw, am, x)) / (2 * h)
                assert abs(fd - grad[idx]) / max(abs(fd), 1e-8) < 1e-4, name
                it.iternext()
        for i in rng.integers(0, x.size, size=20):
            xp = x.reshape(-1).copy(); xp[i] += h
            xm = x.reshape(-1).copy(); xm[i] -= h
            fd = (objective(rw, ck, xp.reshape(x.shape))
                  - objective(rw, ck, xm.reshape(x.shape))) / (2 * h)
            assert abs(fd - gx.reshape(-1)[i]) / max(abs(fd), 1e-8) < 1e-4


class TestInsertRobustBlock:
    def test_insert_at_final_conv(self):
        model = build_toy_model(seed=0)
        before = count_params(model)
        inserted = insert_robust_block(model, 8, seed=1)
        infer_shapes(inserted)  # must stay valid
        spec = inserted.layers[8]
        assert spec.kind == "robust_block" and spec.fresh
        block_params = sum(inserted.params[p].size for p in spec.param_ids)
        assert count_params(inserted) == before + block_params
        for pid, val in model.params.items():
            assert np.array_equal(val, inserted.params[pid])

    def test_insert_at_position_zero_forward_finite(self):
        model = build_toy_model(seed=0)
        inserted = insert_robust_block(model, 0, seed=2)
        x = np.random.default_rng(3).uniform(size=(3, 16, 16))
        assert np.isfinite(forward(inserted, x))

    def test_insertion_changes_scores(self):
        model = build_toy_model(seed=0)
        inserted = insert_robust_block(model, 8, seed=4)
        rng = np.random.default_rng(5)
        diffs = [abs(forward(model, x) - forward(inserted, x))
                 for x in (rng.uniform(size=(3, 16, 16)) for _ in range(10))]
        assert all(d > 1e-12 for d in diffs)

    def test_non_conv_position_rejected(self):
        model = build_toy_model(seed=0)
        with pytest.raises(ConfigurationError):
            insert_robust_block(model, 1, seed=0)  # a relu

    def test_shape_idempotent_through_remove_reinsert(self):
        model = build_toy_model(seed=0)
        inserted = insert_robust_block(model, 8, seed=6)
        shapes_once = infer_shapes(inserted)
        removed = clone_without_layer(inserted, 8)
        assert infer_shapes(removed) == infer_shapes(model)
        reinserted = insert_robust_block(removed, 8, seed=6)
        assert infer_shapes(reinserted) == shapes_once

    def test_masks_shift_on_insert(self):
        model = build_toy_model(seed=0)
        model.masks = {0: [1], 8: [2]}
        inserted = insert_robust_block(model, 3, seed=0)
        assert inserted.masks == {0: [1], 9: [2]}
