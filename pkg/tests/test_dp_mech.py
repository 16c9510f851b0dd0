import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from qpate import dp_mech as dp
from qpate.errors import AccountingError, InfeasibleEpsilonError, UsageError


class TestLaplace:
    def test_inverse_cdf_median_and_quartiles(self):
        assert dp.laplace_from_uniform(0.0, 2.0) == 0.0
        # F^{-1}(3/4) = b ln 2 with b = 1/gamma
        assert dp.laplace_from_uniform(0.25, 2.0) == pytest.approx(0.5 * math.log(2), abs=1e-15)
        assert dp.laplace_from_uniform(-0.25, 2.0) == pytest.approx(-0.5 * math.log(2), abs=1e-15)

    def test_endpoint_is_finite(self):
        assert np.isfinite(dp.laplace_from_uniform(0.5, 1.0))
        assert np.isfinite(dp.laplace_from_uniform(-0.5, 1.0))

    def test_matches_scipy_quantiles(self):
        u = np.linspace(-0.49, 0.49, 99)
        np.testing.assert_allclose(dp.laplace_from_uniform(u, 0.3),
                                   stats.laplace(scale=1 / 0.3).ppf(u + 0.5), rtol=1e-12,
                                   atol=1e-12)

    def test_seeded_is_reproducible(self):
        a = dp.LaplaceNoise.seeded(0.5, 3).sample(10)
        b = dp.LaplaceNoise.seeded(0.5, 3).sample(10)
        np.testing.assert_array_equal(a, b)

    def test_sample_distribution(self):
        x = dp.LaplaceNoise.seeded(0.25, 0).sample(200_000)
        assert stats.kstest(x, stats.laplace(scale=4).cdf).pvalue > 1e-3

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_bad_gamma(self, gamma):
        with pytest.raises(UsageError):
            dp.LaplaceNoise(gamma)


class TestNoisyArgmax:
    def test_noiseless_limit(self):
        noise = dp.LaplaceNoise(math.inf)
        assert dp.noisy_argmax(dp.VoteHistogram((1, 3)), noise) == 1
        assert dp.noisy_argmax(dp.VoteHistogram((2, 2)), noise) == 0  # lowest index on ties

    def test_batch_noiseless(self):
        counts = np.array([[4, 0], [1, 3], [2, 2]])
        np.testing.assert_array_equal(dp.noisy_argmax_batch(counts, dp.LaplaceNoise(math.inf)),
                                      [0, 1, 0])

    def test_batch_rejects_bad_shape(self):
        with pytest.raises(UsageError):
            dp.noisy_argmax_batch(np.zeros(3), dp.LaplaceNoise(1.0))

    def test_histogram_from_predictions(self):
        h = dp.VoteHistogram.from_predictions([1, 1, 0, 1], 2)
        assert h.counts == (1, 3) and h.num_teachers == 4

    def test_histogram_rejects_negative(self):
        with pytest.raises(UsageError):
            dp.VoteHistogram((1, -1))

    def test_frequency_for_three_to_one(self):
        # P(label 0) = 1 - 0.75 e^{-1} for counts (3, 1), gamma = 1/2
        noise = dp.LaplaceNoise.seeded(0.5, 1)
        freq = np.mean(dp.noisy_argmax_batch(np.tile([3, 1], (200_000, 1)), noise) == 0)
        assert freq == pytest.approx(0.7240904191214182, abs=0.005)


class TestSanitizer:
    def test_short_gradient_untouched(self):
        g = np.array([0.3, 0.4])
        np.testing.assert_array_equal(dp.clip_gradient(g, 1.0), g)

    def test_long_gradient_scaled(self):
        np.testing.assert_allclose(dp.clip_gradient(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-3, 1e3))
    def test_clip_never_exceeds(self, values, s):
        assert np.linalg.norm(dp.clip_gradient(np.array(values), s)) <= s

    def test_zero_multiplier_is_clip_only(self):
        cfg = dp.GaussianSanitizerConfig(1.0, 0.0)
        out = dp.sanitize_gradient(np.array([3.0, 4.0]), cfg, np.random.default_rng(0))
        np.testing.assert_allclose(out, [0.6, 0.8])

    @pytest.mark.parametrize("s,sigma", [(0.0, 1.0), (1.0, -0.5)])
    def test_bad_config(self, s, sigma):
        with pytest.raises(UsageError):
            dp.GaussianSanitizerConfig(s, sigma)


class TestAccountant:
    def test_query_moment(self):
        assert dp.query_moment(0.1, 3) == pytest.approx(2 * 0.01 * 12)

    def test_frozen_values(self):
        eps, order = dp.PrivacyLedger(0.02).record_query(1000).moments_epsilon()
        assert eps == pytest.approx(6.878231366242558, rel=1e-12) and order == 4
        assert dp.epsilon_for(0.05, 1000) == pytest.approx(20.756462732485115, rel=1e-12)

    def test_composition_wins_for_few_queries(self):
        assert dp.epsilon_for(0.01, 10) == pytest.approx(0.2)

    def test_empty_ledger(self):
        ledger = dp.PrivacyLedger(0.1)
        assert ledger.moments_epsilon()[0] == pytest.approx(math.log(1e5) / 64)
        assert ledger.epsilon() == 0.0

    def test_queries_accumulate(self):
        ledger = dp.PrivacyLedger(0.01)
        for _ in range(5):
            dp.record_query(ledger)
        assert ledger.query_count == 5
        assert dp.epsilon(ledger) == dp.epsilon_for(0.01, 5)

    def test_negative_count_rejected(self):
        with pytest.raises(UsageError):
            dp.PrivacyLedger(0.1).record_query(-1)

    @pytest.mark.parametrize("target", [0.01, 0.1, 1.0, 10.0])
    @pytest.mark.parametrize("queries", [100, 1000])
    def test_solve_gamma_round_trip(self, target, queries):
        g = dp.solve_gamma(target, queries)
        assert dp.epsilon_for(g, queries) <= target
        assert dp.epsilon_for(g * (1 + 1e-5), queries) > target

    def test_solve_gamma_known_value(self):
        # at eps=0.1, Q=1000 simple composition is the binding bound
        assert dp.solve_gamma(0.1, 1000) == pytest.approx(5e-5, rel=1e-5)

    def test_solve_gamma_zero_queries(self):
        assert dp.solve_gamma(1.0, 0) == math.inf

    def test_solve_gamma_bad_target(self):
        with pytest.raises(UsageError):
            dp.solve_gamma(0.0, 10)

    def test_check_budget(self):
        ledger = dp.PrivacyLedger(0.05).record_query(1000)
        with pytest.raises(AccountingError):
            dp.check_budget(ledger, 1.0)
        assert dp.check_budget(ledger, 25.0) == pytest.approx(20.756462732485115)

    def test_infeasible_is_accounting_error(self):
        assert issubclass(InfeasibleEpsilonError, AccountingError)

    def test_report_and_dict(self):
        ledger = dp.PrivacyLedger(0.02).record_query(1000)
        assert "eps_certified" in ledger.report()
        d = ledger.to_dict()
        assert d["query_count"] == 1000 and len(d["moments"]) == 64
