import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nose_align.adapters import finite_diff_gradient
from nose_align.linalg import Rng, cosine_similarity
from nose_align.orthogonal import (OrthoConfig, hard_orthogonalize,
                                   hard_orthogonalize_backward,
                                   soft_orthogonality_loss)

vec_strategy = st.lists(st.floats(min_value=-100, max_value=100,
                                  allow_nan=False), min_size=2, max_size=6)


class TestHardOrthogonalize:
    def test_already_orthogonal(self):
        assert np.allclose(hard_orthogonalize([0, 1], [1, 0], 0.0), [0, 1])

    def test_projection_removal(self):
        assert np.allclose(hard_orthogonalize([2, 3], [1, 0], 0.0), [0, 3])

    def test_degenerate_guard(self):
        out = hard_orthogonalize([1, 1], [0, 0], 1e-8)
        assert np.allclose(out, [1, 1])

    def test_batch_rows_match_vector_calls(self):
        rng = Rng(3)
        a = rng.normal(12).reshape(3, 4)
        z = rng.normal(12).reshape(3, 4)
        batch = hard_orthogonalize(a, z)
        for i in range(3):
            assert np.allclose(batch[i], hard_orthogonalize(a[i], z[i]),
                               atol=1e-15)

    def test_result_orthogonal_to_z(self):
        rng = Rng(3)
        for _ in range(10):
            a = rng.normal(8)
            z = rng.normal(8)
            out = hard_orthogonalize(a, z, 1e-8)
            assert abs(cosine_similarity(out, z)) < 1e-6

    @given(vec_strategy)
    @settings(max_examples=60)
    def test_idempotent(self, raw):
        # the exact projector (eps=0) is idempotent; the norm floor is what
        # makes the eps guard unnecessary
        z = np.array(raw)
        if np.linalg.norm(z) < 1e-3:
            z = z + 1.0
        a = np.arange(1.0, len(z) + 1)
        once = hard_orthogonalize(a, z, 0.0)
        twice = hard_orthogonalize(once, z, 0.0)
        assert np.allclose(once, twice, atol=1e-12)

    def test_near_idempotent_with_eps_guard(self):
        # with eps > 0 the second application removes a residual of exactly
        # |a.z| * eps * |z| / (|z|^2 + eps)^2
        rng = Rng(17)
        for _ in range(10):
            a = rng.normal(5)
            z = rng.normal(5)
            eps = 1e-8
            once = hard_orthogonalize(a, z, eps)
            twice = hard_orthogonalize(once, z, eps)
            nz = float(z @ z)
            bound = abs(float(a @ z)) * eps * np.sqrt(nz) / (nz + eps) ** 2
            assert np.linalg.norm(twice - once) <= bound + 1e-12

    def test_reconstruction_with_zero_eps(self):
        rng = Rng(9)
        a = rng.normal(6)
        z = rng.normal(6)
        out = hard_orthogonalize(a, z, 0.0)
        removed = (float(a @ z) / float(z @ z)) * z
        assert np.allclose(out + removed, a, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            hard_orthogonalize([1, 2], [1, 2, 3])


class TestHardBackward:
    def test_zero_upstream(self):
        da = hard_orthogonalize_backward([1, 2], [1, 0], 1e-8, [0, 0])
        assert np.allclose(da, 0.0)

    def test_projector_applied_to_upstream(self):
        da = hard_orthogonalize_backward([9, 9], [1, 0], 0.0, [5, 7])
        assert np.allclose(da, [0, 7])

    def test_matches_finite_differences(self):
        rng = Rng(21)
        a = rng.normal(8)
        z = rng.normal(8)
        g = rng.normal(8)

        def loss():
            return float(hard_orthogonalize(a, z, 1e-8) @ g)

        da = hard_orthogonalize_backward(a, z, 1e-8, g)
        numeric = finite_diff_gradient(loss, {"a": a}, h=1e-6)["a"]
        assert np.max(np.abs(da - numeric) / np.maximum(np.abs(numeric), 1e-6)) < 1e-6


class TestSoftOrthogonality:
    def test_hand_fixture(self):
        z = np.array([[1.0, 0.0]])
        a_r = np.array([[0.0, 1.0]])
        a_d = np.array([[1.0, 1.0]]) / np.sqrt(2)
        loss, _, _ = soft_orthogonality_loss(z, a_r, a_d)
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_mutually_orthogonal_triple(self):
        loss, gr, gd = soft_orthogonality_loss(
            np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]),
            np.array([[0, 0, 1.0]]))
        assert loss == 0.0
        assert np.allclose(gr, 0.0) and np.allclose(gd, 0.0)

    def test_identical_rows(self):
        row = np.array([[1.0, 0.0]])
        loss, _, _ = soft_orthogonality_loss(row, row, row)
        assert loss == pytest.approx(3.0, abs=1e-12)

    def test_ordered_mode_doubles(self):
        rng = Rng(5)
        z = rng.normal(12).reshape(3, 4)
        ar = rng.normal(12).reshape(3, 4)
        ad = rng.normal(12).reshape(3, 4)
        lu, gru, gdu = soft_orthogonality_loss(z, ar, ad, "unordered")
        lo, gro, gdo = soft_orthogonality_loss(z, ar, ad, "ordered")
        assert lo == pytest.approx(2 * lu, abs=1e-12)
        assert np.allclose(gro, 2 * gru) and np.allclose(gdo, 2 * gdu)

    def test_loss_nonnegative(self):
        rng = Rng(6)
        for _ in range(20):
            loss, _, _ = soft_orthogonality_loss(
                rng.normal(8).reshape(2, 4), rng.normal(8).reshape(2, 4),
                rng.normal(8).reshape(2, 4))
            assert loss >= 0.0

    def test_gradients_match_finite_differences(self):
        rng = Rng(13)
        z = rng.normal(12).reshape(3, 4)
        ar = rng.normal(12).reshape(3, 4)
        ad = rng.normal(12).reshape(3, 4)

        def loss():
            return soft_orthogonality_loss(z, ar, ad)[0]

        _, g_ar, g_ad = soft_orthogonality_loss(z, ar, ad)
        numeric = finite_diff_gradient(loss, {"ar": ar, "ad": ad}, h=1e-6)
        assert np.allclose(g_ar, numeric["ar"], atol=1e-7)
        assert np.allclose(g_ad, numeric["ad"], atol=1e-7)

    def test_z_receives_no_gradient_by_construction(self):
        # perturbing z changes the loss, but the API only returns adapter
        # gradients; here we assert the returned tuple shape/contract
        rng = Rng(14)
        z = rng.normal(8).reshape(2, 4)
        out = soft_orthogonality_loss(z, rng.normal(8).reshape(2, 4),
                                      rng.normal(8).reshape(2, 4))
        assert len(out) == 3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_orthogonality_loss(np.ones((2, 3)), np.ones((2, 3)),
                                    np.ones((3, 3)))


def test_ortho_config_validation():
    with pytest.raises(ValueError):
        OrthoConfig(eps=0.0)
    with pytest.raises(ValueError):
        OrthoConfig(pair_mode="diagonal")
    assert OrthoConfig().lambda_orth == 2.0
