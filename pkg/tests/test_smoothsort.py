import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from classconf.exceptions import CalibrationSizeError
from classconf.smoothsort import conformal_rank, hard_quantile, relaxed_sort, smooth_quantile

from conftest import central_diff, rel_err
from oracles import order_statistic_threshold


def distinct_scores(min_gap, m_max=30):
    return arrays(np.float64, st.integers(2, m_max), elements=st.floats(0, 10),
                  unique=True).filter(lambda s: np.min(np.diff(np.sort(s))) >= min_gap)


class TestRelaxedSort:
    def test_singleton(self):
        np.testing.assert_array_equal(relaxed_sort([4.2], 1.0), [[1.0]])

    def test_hand_permutation(self):
        p = relaxed_sort([3.0, 1.0, 2.0], 100.0)
        np.testing.assert_allclose(p, [[1, 0, 0], [0, 0, 1], [0, 1, 0]], atol=1e-3)

    def test_equal_entries_uniform(self):
        np.testing.assert_allclose(relaxed_sort(np.full(5, 0.3), 7.0), 0.2)

    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-5, 5)), st.floats(0.1, 50))
    def test_row_stochastic(self, s, tau):
        np.testing.assert_allclose(relaxed_sort(s, tau).sum(axis=1), 1.0, atol=1e-6)

    @given(distinct_scores(0.05, 10))
    def test_converges_to_hard_sort(self, s):
        p = relaxed_sort(s, 1000.0)
        hard = np.zeros_like(p)
        hard[np.arange(len(s)), np.argsort(-s, kind="stable")] = 1.0
        np.testing.assert_allclose(p, hard, atol=1e-6)


class TestHardQuantile:
    def test_index_arithmetic(self):
        assert conformal_rank(9, 0.1) == 9
        assert conformal_rank(5, 0.05) == 6

    def test_nine_values(self):
        assert hard_quantile(np.arange(1, 10, dtype=float), 0.1) == 9.0

    def test_overflow_is_infinite(self):
        assert hard_quantile(np.arange(5, dtype=float), 0.05) == math.inf

    def test_multiset(self):
        assert hard_quantile([1.0, 2.0, 2.0, 2.0, 3.0], 0.5) == 2.0

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-100, 100)),
           st.sampled_from([0.01, 0.05, 0.1, 0.2, 0.25, 0.5, 0.9]))
    def test_matches_oracle(self, s, alpha):
        assert hard_quantile(s, alpha) == order_statistic_threshold(s, alpha)

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-10, 10)), st.floats(-5, 5),
           st.randoms())
    def test_translation_and_permutation(self, s, c, rnd):
        q = hard_quantile(s, 0.2)
        assume(math.isfinite(q))
        assert hard_quantile(s + c, 0.2) == pytest.approx(q + c, abs=1e-12)
        perm = list(range(len(s)))
        rnd.shuffle(perm)
        assert hard_quantile(s[perm], 0.2) == q


class TestSmoothQuantile:
    def test_nine_ascending(self):
        s = np.arange(1, 10) / 10.0
        value, _ = smooth_quantile(s, 0.1, 100.0)
        assert abs(value - 0.9) < 1e-3

    def test_singleton(self):
        value, grad = smooth_quantile([0.42], 0.5, 3.0)
        assert value == 0.42 and grad[0] == 1.0

    def test_too_small(self):
        with pytest.raises(CalibrationSizeError):
            smooth_quantile(np.arange(5.0), 0.05, 10.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_fd(self, seed):
        s = np.random.default_rng(seed).uniform(size=20)
        _, g = smooth_quantile(s, 0.1, 10.0)
        num = central_diff(lambda v: smooth_quantile(v, 0.1, 10.0)[0], s)
        assert rel_err(g, num) < 1e-3

    @given(distinct_scores(1e-3, 25), st.sampled_from([0.05, 0.1, 0.2]))
    def test_sharp_limit(self, s, alpha):
        assume(conformal_rank(len(s), alpha) <= len(s))
        value, _ = smooth_quantile(s, alpha, 1e5)
        assert abs(value - hard_quantile(s, alpha)) < 1e-3

    @given(arrays(np.float64, st.integers(10, 20), elements=st.floats(0, 1)), st.floats(-3, 3),
           st.randoms())
    def test_equivariance(self, s, c, rnd):
        v, _ = smooth_quantile(s, 0.1, 10.0)
        perm = list(range(len(s)))
        rnd.shuffle(perm)
        assert smooth_quantile(s[perm], 0.1, 10.0)[0] == pytest.approx(v, abs=1e-9)
        assert smooth_quantile(s + c, 0.1, 10.0)[0] == pytest.approx(v + c, abs=1e-6)
