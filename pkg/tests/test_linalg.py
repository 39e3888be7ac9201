import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nose_align.linalg import (Rng, cosine_similarity, gaussian_sample,
                               log_softmax_row, log_softmax_rows,
                               normalize_rows, normalize_rows_backward,
                               pairwise_similarity)

finite_floats = st.floats(min_value=-1e6, max_value=1e6,
                          allow_nan=False, allow_infinity=False)


class TestCosine:
    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_parallel_scale_invariant(self):
        assert cosine_similarity([1, 0], [2, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_convention(self):
        assert cosine_similarity([0, 0], [1, 1]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1, 2], [1, 2, 3])

    @given(st.lists(finite_floats, min_size=2, max_size=8),
           st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=100)
    def test_positive_scaling_invariance(self, vec, scale):
        other = list(range(1, len(vec) + 1))
        base = cosine_similarity(vec, other)
        scaled = cosine_similarity([scale * v for v in vec], other)
        assert scaled == pytest.approx(base, abs=1e-12)


class TestPairwise:
    def test_identity_rows(self):
        eye = np.eye(3)
        sims = pairwise_similarity(eye, eye)
        assert np.allclose(np.diag(sims), 1.0)
        assert np.allclose(sims, sims.T)

    def test_small_fixture(self):
        out = pairwise_similarity(np.array([[1.0, 0.0]]),
                                  np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.allclose(out, [[0.0, 1.0]])

    def test_matches_per_entry_oracle(self):
        rng = Rng(9)
        a = rng.normal(12).reshape(3, 4)
        b = rng.normal(20).reshape(5, 4)
        sims = pairwise_similarity(a, b)
        for i in range(3):
            for j in range(5):
                assert sims[i, j] == pytest.approx(
                    cosine_similarity(a[i], b[j]), abs=1e-12)

    def test_self_similarity_symmetric_unit_diagonal(self):
        rng = Rng(4)
        a = rng.normal(24).reshape(6, 4)
        sims = pairwise_similarity(a, a)
        assert np.allclose(sims, sims.T, atol=1e-15)
        assert np.allclose(np.diag(sims), 1.0, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            pairwise_similarity(np.ones((2, 3)), np.ones((2, 4)))


class TestLogSoftmax:
    def test_symmetric_pair(self):
        out = log_softmax_row([0.0, 0.0], 1.0)
        assert np.allclose(out, [-math.log(2)] * 2, atol=1e-15)

    def test_one_zero(self):
        out = log_softmax_row([1.0, 0.0], 1.0)
        expect0 = -math.log(1 + math.exp(-1))
        assert out[0] == pytest.approx(expect0, abs=1e-12)
        assert out[1] == pytest.approx(expect0 - 1.0, abs=1e-12)

    def test_no_overflow(self):
        out = log_softmax_row([1000.0, 0.0], 1.0)
        assert out[0] == pytest.approx(0.0, abs=1e-12)
        assert out[1] == pytest.approx(-1000.0, abs=1e-9)

    def test_empty_vector(self):
        with pytest.raises(ValueError):
            log_softmax_row([], 1.0)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            log_softmax_row([1.0], 0.0)

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1,
                    max_size=10),
           st.floats(min_value=0.05, max_value=10))
    @settings(max_examples=100)
    def test_probabilities_sum_to_one(self, xs, tau):
        out = log_softmax_row(xs, tau)
        assert np.exp(out).sum() == pytest.approx(1.0, abs=1e-12)

    def test_rows_variant_matches(self):
        rng = Rng(2)
        s = rng.normal(12).reshape(3, 4)
        rows = log_softmax_rows(s, 0.3)
        for i in range(3):
            assert np.allclose(rows[i], log_softmax_row(s[i], 0.3), atol=1e-14)


class TestRng:
    def test_determinism(self):
        a = gaussian_sample(Rng(42), 4, 1.0)
        b = gaussian_sample(Rng(42), 4, 1.0)
        assert np.array_equal(a, b)

    def test_integer_stream_differs_by_seed(self):
        assert [Rng(1).next_u64() for _ in range(4)] != \
            [Rng(2).next_u64() for _ in range(4)]

    def test_tiny_sigma(self):
        v = gaussian_sample(Rng(0), 100000, 1e-9)
        assert abs(v.mean()) < 1e-7 and v.std() < 1e-7

    def test_moments(self):
        v = gaussian_sample(Rng(7), 100000, 2.0)
        assert 3.8 <= v.var() <= 4.2
        # mean within 3 sigma of 0: sigma_mean = 2/sqrt(n)
        assert abs(v.mean()) <= 3 * 2 / math.sqrt(100000)

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            gaussian_sample(Rng(0), 3, 0.0)

    def test_randbelow_bounds(self):
        rng = Rng(3)
        draws = [rng.randbelow(7) for _ in range(500)]
        assert min(draws) == 0 and max(draws) == 6

    def test_shuffle_is_permutation(self):
        rng = Rng(5)
        xs = list(range(20))
        rng.shuffle(xs)
        assert sorted(xs) == list(range(20))

    def test_sample_indices_distinct(self):
        rng = Rng(5)
        idx = rng.sample_indices(10, 6)
        assert len(set(idx)) == 6 and all(0 <= i < 10 for i in idx)
        with pytest.raises(ValueError):
            rng.sample_indices(3, 4)


class TestNormalizeRows:
    def test_degenerate_row_zeroed(self):
        out, norms = normalize_rows(np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert np.allclose(out[0], 0.0)
        assert np.allclose(out[1], [0.6, 0.8])

    def test_backward_matches_finite_difference(self):
        rng = Rng(12)
        x = rng.normal(12).reshape(4, 3)
        g = rng.normal(12).reshape(4, 3)
        xn, norms = normalize_rows(x)
        dx = normalize_rows_backward(g, xn, norms)
        h = 1e-6
        for i in range(4):
            for j in range(3):
                x[i, j] += h
                up = float((normalize_rows(x)[0] * g).sum())
                x[i, j] -= 2 * h
                dn = float((normalize_rows(x)[0] * g).sum())
                x[i, j] += h
                assert dx[i, j] == pytest.approx((up - dn) / (2 * h), abs=1e-6)
