import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose
from scipy import stats as sst

from gmbank.stats import (
    ErrorSeries,
    TestResult,
    ansari_bradley,
    cep,
    confidence_interval,
    ks_two_sample,
    rmse,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
samples = arrays(np.float64, st.integers(20, 80), elements=finite)


class TestRmse:
    def test_examples(self):
        assert_allclose(rmse([3, 4]), np.sqrt(12.5))
        assert abs(rmse([3, 4]) - 3.53553) < 1e-5
        assert rmse([0, 0, 0]) == 0.0
        assert rmse([1, 1, 1, 1]) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            rmse([])

    def test_per_run_axis(self):
        e = np.array([[3.0, 4.0], [1.0, 1.0]])
        assert_allclose(rmse(e), [np.sqrt(12.5), 1.0])

    @given(arrays(np.float64, st.integers(1, 50), elements=finite))
    def test_nonnegative_and_zero_iff(self, e):
        r = rmse(e)
        assert r >= 0
        assert (r == 0) == bool(np.all(e == 0))


class TestCep:
    def test_examples(self):
        assert cep([1, 2, 3]) == 2
        assert cep([1, 2, 3, 4]) == 2.5
        assert cep([-5, 5]) == 5
        assert cep([-1, -2, -3]) == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            cep(np.zeros(0))

    def test_error_series(self):
        s = ErrorSeries([3.0, -4.0])
        assert s.n == 2
        assert s.cep() == 3.5
        assert_allclose(s.rmse(), np.sqrt(12.5))

    def test_error_series_validation(self):
        with pytest.raises(ValueError):
            ErrorSeries([])
        with pytest.raises(ValueError):
            ErrorSeries([1.0, np.nan])


class TestKS:
    def test_identical(self):
        a = np.random.default_rng(0).normal(size=50)
        res = ks_two_sample(a, a)
        assert res.statistic == 0 and res.accepted

    def test_disjoint(self):
        res = ks_two_sample(-np.arange(1, 11), np.arange(1, 11))
        assert res.statistic == 1 and not res.accepted

    def test_threshold(self):
        res = ks_two_sample(np.arange(10.0), np.arange(40.0))
        assert_allclose(res.threshold, 1.3581 * np.sqrt(50 / 400))

    def test_size_check(self):
        with pytest.raises(ValueError):
            ks_two_sample(np.arange(9.0), np.arange(20.0))

    def test_alpha_fixed(self):
        with pytest.raises(ValueError):
            ks_two_sample(np.arange(20.0), np.arange(20.0), alpha=0.1)

    @settings(max_examples=50, deadline=None)
    @given(samples, samples)
    def test_matches_scipy_statistic(self, a, b):
        ref = sst.ks_2samp(a, b, method="asymp").statistic
        assert_allclose(ks_two_sample(a, b).statistic, ref, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(samples, samples, st.randoms())
    def test_range_and_permutation_invariance(self, a, b, rnd):
        d = ks_two_sample(a, b).statistic
        assert 0 <= d <= 1
        perm = np.array(a)
        rnd.shuffle(perm)
        assert ks_two_sample(perm, b).statistic == d

    def test_accepted_iff_below_threshold(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            r = ks_two_sample(rng.normal(size=30), rng.normal(0.5, size=30))
            assert r.accepted == (r.statistic <= r.threshold)

    def test_calibration(self):
        rng = np.random.default_rng(2024)
        rej = np.mean([not ks_two_sample(rng.normal(size=1000), rng.normal(size=1000)).accepted
                       for _ in range(1000)])
        assert abs(rej - 0.05) <= 0.02


class TestAnsariBradley:
    def test_identical(self):
        a = np.random.default_rng(0).normal(size=100)
        res = ansari_bradley(a, a)
        assert abs(res.statistic) < 1e-12 and res.accepted

    def test_size_check(self):
        with pytest.raises(ValueError):
            ansari_bradley(np.arange(19.0), np.arange(30.0))

    def test_scaled_rejected(self):
        rng = np.random.default_rng(5)
        rej = []
        for _ in range(200):
            a = rng.normal(size=500)
            rej.append(not ansari_bradley(a, 10 * rng.normal(size=500)).accepted)
        assert np.mean(rej) > 0.99

    def test_calibration(self):
        rng = np.random.default_rng(77)
        rej = np.mean([not ansari_bradley(rng.normal(size=500), rng.normal(size=500)).accepted
                       for _ in range(1000)])
        assert abs(rej - 0.05) <= 0.02

    def test_matches_scipy_pvalue(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.normal(size=300), rng.normal(scale=1.2, size=400)
            assert_allclose(ansari_bradley(a, b).pvalue, sst.ansari(a, b).pvalue, rtol=1e-6)

    def test_ties_match_permutation_oracle(self):
        # heavy ties: null moments of the score sum come from random relabelling
        a = np.repeat([0.0, 1.0, 2.0], 10)
        b = np.repeat([0.0, 1.0, 2.0, 3.0], 8)
        pooled = np.concatenate([a, b])
        N, n = pooled.size, a.size
        rank = sst.rankdata(pooled)
        score = np.minimum(rank, N + 1 - rank)
        rng = np.random.default_rng(0)
        sums = np.array([score[rng.permutation(N)[:n]].sum() for _ in range(100_000)])
        z = (score[:n].sum() - sums.mean()) / sums.std()
        assert_allclose(ansari_bradley(a, b).statistic, abs(z), rtol=0.01)

    @settings(max_examples=40, deadline=None)
    @given(samples, samples, st.floats(-1e3, 1e3))
    def test_location_shift_invariance(self, a, b, shift):
        base = ansari_bradley(a, b).statistic
        # shifting both samples keeps the pooled ranks unless rounding creates ties
        shifted = ansari_bradley(a + shift, b + shift)
        if np.unique(np.concatenate([a, b])).size == np.unique(
                np.concatenate([a + shift, b + shift])).size:
            assert_allclose(shifted.statistic, base, atol=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=50), rng.normal(size=60)
        assert ansari_bradley(a, b) == ansari_bradley(a, b)


class TestConfidenceInterval:
    def test_constant(self):
        assert confidence_interval([2.0, 2.0, 2.0]) == (2.0, 2.0)

    def test_center(self):
        lo, hi = confidence_interval([0.0, 2.0])
        assert_allclose((lo + hi) / 2, 1.0)
        assert_allclose(hi - lo, 2 * 1.959963984540054 * np.sqrt(2) / np.sqrt(2))

    def test_degenerate(self):
        with pytest.raises(ValueError):
            confidence_interval([1.0])
        with pytest.raises(ValueError):
            confidence_interval([1.0, np.inf])

    def test_coverage(self):
        rng = np.random.default_rng(11)
        hits = 0
        for _ in range(1000):
            lo, hi = confidence_interval(rng.normal(3.0, 2.0, size=10_000))
            hits += lo <= 3.0 <= hi
        assert abs(hits / 1000 - 0.95) <= 0.02


def test_result_fields():
    r = TestResult(0.1, 0.2, True)
    assert r.alpha == 0.05 and np.isnan(r.pvalue)
