import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import special, stats as sps

from firescope import stats_tests as stt


class TestDistributions:
    def test_normal_cdf(self):
        assert stt.normal_cdf(0.0) == 0.5
        assert stt.normal_cdf(1.959964) == pytest.approx(0.975, abs=1e-6)

    @pytest.mark.parametrize("df", [1, 2.5, 7, 30, 398])
    def test_t_cdf_zero(self, df):
        assert stt.t_cdf(0.0, df) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("x,df", [(0.3, 1), (-2.0, 3), (2.1, 9.5), (5.0, 40), (32.9, 391)])
    def test_t_against_scipy(self, x, df):
        assert stt.t_sf(x, df) == pytest.approx(sps.t.sf(x, df), rel=1e-9)
        assert stt.t_cdf(x, df) == pytest.approx(sps.t.cdf(x, df), rel=1e-9)

    @pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2, 3, 0.7), (10, 0.5, 0.99), (200, 0.5, 0.2)])
    def test_regularized_beta(self, a, b, x):
        assert stt.regularized_beta(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-10)


class TestTwoProportion:
    def test_reported_accuracy_rows(self):
        r1 = stt.two_proportion_z(0.95572, 1084, 0.93266, 1084, "greater")
        r2 = stt.two_proportion_z(0.96863, 1084, 0.95572, 1084, "greater")
        assert r1.p_value == pytest.approx(0.0097, abs=5e-4)
        assert r2.p_value == pytest.approx(0.0575, abs=3e-3)

    def test_equal_proportions(self):
        r = stt.two_proportion_z(0.7, 100, 0.7, 50)
        assert r.statistic == 0.0 and r.p_value == 0.5

    def test_degenerate_pool(self):
        with pytest.raises(ValueError, match="variance"):
            stt.two_proportion_z(1.0, 10, 1.0, 10)

    def test_bad_alternative(self):
        with pytest.raises(ValueError, match="alternative"):
            stt.two_proportion_z(0.5, 10, 0.4, 10, "bigger")


class TestWelch:
    def test_reported_timing_e_vs_b(self):
        r = stt.welch_t(2.76575, 0.05577, 200, 2.57293, 0.06129, 200, "greater")
        assert r.p_value < 1e-12 and r.statistic > 30

    def test_e_vs_c_formula_value(self):
        r = stt.welch_t(2.77919, 0.06128, 200, 2.76575, 0.05577, 200, "greater")
        assert r.p_value == pytest.approx(0.011, abs=1e-3)

    def test_against_scipy(self):
        r = stt.welch_t(2.77919, 0.06128, 200, 2.76575, 0.05577, 200, "two-sided")
        ref = sps.ttest_ind_from_stats(2.77919, 0.06128, 200, 2.76575, 0.05577, 200, equal_var=False)
        assert r.statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)

    def test_equal_inputs(self):
        r = stt.welch_t(1.0, 0.2, 10, 1.0, 0.2, 10)
        assert r.statistic == 0.0 and r.p_value == pytest.approx(0.5)

    @pytest.mark.parametrize("args", [(1, 0, 5, 1, 1, 5), (1, 1, 1, 1, 1, 5)])
    def test_errors(self, args):
        with pytest.raises(ValueError):
            stt.welch_t(*args)


class TestPaired:
    def test_hand_computation(self):
        d = [1.0, 2.0, 3.0, 4.0, 6.0]
        # mean 3.2, sample variance 3.7
        expected_t = 3.2 / math.sqrt(3.7 / 5)
        r = stt.paired_t(d)
        assert r.statistic == pytest.approx(expected_t, abs=1e-10)
        assert r.df == 4
        assert r.p_value == pytest.approx(sps.t.sf(expected_t, 4), rel=1e-9)

    def test_symmetric(self):
        r = stt.paired_t([0.1, -0.1, 0.3, -0.3])
        assert r.statistic == 0.0 and r.p_value == pytest.approx(0.5)

    def test_constant_rejected(self):
        with pytest.raises(ValueError, match="zero variance"):
            stt.paired_t([0.2] * 5)

    def test_too_short(self):
        with pytest.raises(ValueError):
            stt.paired_t([1.0])


def test_mean_sd():
    assert stt.mean_sd([2.0] * 5) == (2.0, 0.0)
    m, s = stt.mean_sd([1.0, 2.0, 3.0, 4.0, 6.0])
    assert m == pytest.approx(3.2) and s == pytest.approx(math.sqrt(3.7))


def test_summary_text():
    text = stt.welch_t(2.0, 0.1, 10, 1.0, 0.1, 10).summary()
    assert text.startswith("welch t (greater)") and "df=" in text


prop = st.floats(0.01, 0.99)
size = st.integers(5, 5000)


@given(prop, size, prop, size)
def test_z_antisymmetry(p1, n1, p2, n2):
    a = stt.two_proportion_z(p1, n1, p2, n2, "greater")
    b = stt.two_proportion_z(p2, n2, p1, n1, "greater")
    assert b.statistic == pytest.approx(-a.statistic, abs=1e-12)
    assert b.p_value == pytest.approx(1.0 - a.p_value, abs=1e-12)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.05, 3), st.integers(2, 300))
def test_welch_equal_sds_matches_pooled(m1, m2, sd, n):
    r = stt.welch_t(m1, sd, n, m2, sd, n)
    pooled_t = (m1 - m2) / (sd * math.sqrt(2.0 / n))
    assert r.statistic == pytest.approx(pooled_t, rel=1e-9, abs=1e-12)
    assert r.df == pytest.approx(2 * n - 2, rel=1e-9)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.randoms())
def test_paired_permutation_invariant(values, rnd):
    assume(np.var(values) > 1e-6)
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert stt.paired_t(shuffled).statistic == pytest.approx(stt.paired_t(values).statistic,
                                                             rel=1e-9, abs=1e-9)


@given(st.floats(-40, 40), st.floats(0.5, 500))
def test_t_tails_sum_to_one(x, df):
    assert stt.t_sf(x, df) + stt.t_cdf(x, df) == pytest.approx(1.0, abs=1e-12)
