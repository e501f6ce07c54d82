import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zclipkit.stats import (
    EmaState,
    WarmupBuffer,
    ema_update,
    normal_quantile,
    normality_diagnostic,
    warmup_finalize,
    z_score,
)

finite_norms = st.floats(min_value=0.0, max_value=1e6, allow_nan=False, allow_infinity=False)


def _ema_exact(mu, var, alpha, g):
    # exact rational arithmetic: mean first, then variance around the new mean
    mu, var, alpha, g = map(Fraction, (mu, var, alpha, g))
    mu_new = alpha * mu + (1 - alpha) * g
    var_new = alpha * var + (1 - alpha) * (g - mu_new) ** 2
    return mu_new, var_new


class TestEmaUpdate:
    def test_worked_example(self):
        s = ema_update(EmaState(mu=1.0, var=0.01, alpha=0.97), 1.0)
        assert s.mu == pytest.approx(1.0, abs=1e-15)
        assert s.var == pytest.approx(0.0097, rel=1e-12)

    def test_moves_toward_observation(self):
        s = ema_update(EmaState(mu=1.0, var=0.01, alpha=0.97), 2.0)
        exact_mu, exact_var = _ema_exact(1.0, 0.01, 0.97, 2.0)
        assert s.mu == pytest.approx(float(exact_mu), rel=1e-14)
        assert s.var == pytest.approx(float(exact_var), rel=1e-14)
        assert s.mu == pytest.approx(1.03)
        assert s.var == pytest.approx(0.97 * 0.01 + 0.03 * 0.97**2)

    @given(
        mu=st.floats(0, 100),
        var=st.floats(0, 100),
        alpha=st.floats(0.01, 0.99),
        g=st.floats(0, 100),
    )
    def test_matches_rational_oracle(self, mu, var, alpha, g):
        s = ema_update(EmaState(mu=mu, var=var, alpha=alpha), g)
        exact_mu, exact_var = _ema_exact(mu, var, alpha, g)
        assert s.mu == pytest.approx(float(exact_mu), rel=1e-12, abs=1e-300)
        assert s.var == pytest.approx(float(exact_var), rel=1e-10, abs=1e-12)
        assert s.var >= 0.0

    def test_does_not_mutate_input(self):
        s0 = EmaState(mu=1.0, var=0.5)
        ema_update(s0, 10.0)
        assert (s0.mu, s0.var, s0.steps_seen) == (1.0, 0.5, 0)

    def test_in_place_update_counts_steps(self):
        s = EmaState(mu=1.0, var=0.5)
        s.update(2.0)
        s.update(3.0)
        assert s.steps_seen == 2

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ValueError, match="alpha"):
            EmaState(mu=1.0, var=0.1, alpha=alpha)

    def test_rejects_nonfinite_observation(self):
        s = EmaState(mu=1.0, var=0.1)
        with pytest.raises(ValueError):
            s.update(math.nan)
        with pytest.raises(ValueError):
            ema_update(s, math.inf)

    def test_negative_epsilon_rejected(self):
        with pytest.raises(ValueError, match="epsilon"):
            EmaState(mu=1.0, var=0.1, epsilon=-1e-6)


class TestZScore:
    def test_example(self):
        s = EmaState(mu=1.0, var=0.01, epsilon=1e-6)
        assert z_score(s, 1.5) == pytest.approx(0.5 / (0.1 + 1e-6), rel=1e-12)

    def test_zero_variance_uses_epsilon(self):
        s = EmaState(mu=1.0, var=0.0, epsilon=1e-6)
        assert z_score(s, 1.0 + 1e-6) == pytest.approx(1.0, rel=1e-9)

    def test_degenerate_without_epsilon(self):
        s = EmaState(mu=1.0, var=0.0, epsilon=0.0)
        assert z_score(s, 2.0) == math.inf
        assert z_score(s, 0.5) == -math.inf
        assert z_score(s, 1.0) == 0.0

    @given(mu=st.floats(0, 10), var=st.floats(1e-6, 10), g=st.floats(0, 10), k=st.floats(0.01, 100))
    def test_scale_invariant_without_epsilon(self, mu, var, g, k):
        a = z_score(EmaState(mu=mu, var=var, epsilon=0.0), g)
        b = z_score(EmaState(mu=k * mu, var=k * k * var, epsilon=0.0), k * g)
        assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


class TestWarmup:
    def test_finalize_population_statistics(self):
        norms = [float(i) for i in range(1, 26)]
        s = warmup_finalize(WarmupBuffer(25, norms))
        assert s.mu == pytest.approx(13.0, rel=1e-15)
        assert s.var == pytest.approx(52.0, rel=1e-15)  # (25**2 - 1) / 12
        assert s.steps_seen == 25

    @given(st.lists(finite_norms, min_size=25, max_size=25))
    def test_matches_numpy(self, norms):
        s = warmup_finalize(WarmupBuffer(25, list(norms)))
        assert s.mu == pytest.approx(np.mean(norms), rel=1e-12, abs=1e-300)
        assert s.var == pytest.approx(np.var(norms), rel=1e-9, abs=1e-9 * (1 + max(norms)) ** 2 * 1e-6)

    def test_requires_full_buffer(self):
        with pytest.raises(ValueError, match="needs exactly 25"):
            warmup_finalize(WarmupBuffer(25, [1.0] * 10))

    def test_push_past_capacity(self):
        b = WarmupBuffer(2)
        b.push(1.0)
        b.push(2.0)
        assert b.full
        with pytest.raises(ValueError, match="full"):
            b.push(3.0)

    @pytest.mark.parametrize("bad", [-1.0, math.nan, math.inf])
    def test_push_rejects_bad_norms(self, bad):
        with pytest.raises(ValueError):
            WarmupBuffer(3).push(bad)

    def test_zero_capacity(self):
        with pytest.raises(ValueError):
            WarmupBuffer(0)


def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


class TestNormalQuantile:
    def test_known_values(self):
        assert normal_quantile(0.5) == pytest.approx(0.0, abs=1e-12)
        assert normal_quantile(0.99) == pytest.approx(2.32635, abs=1e-5)
        assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    @given(st.floats(1e-10, 1 - 1e-10))
    def test_inverts_erfc(self, p):
        x = normal_quantile(p)
        # compare on the smaller tail to keep relative precision
        if p < 0.5:
            assert _phi(x) == pytest.approx(p, rel=1e-7)
        else:
            assert 1.0 - _phi(x) == pytest.approx(1.0 - p, rel=1e-7)

    def test_against_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        ps = np.linspace(0.001, 0.999, 999)
        ours = np.array([normal_quantile(p) for p in ps])
        np.testing.assert_allclose(ours, scipy_stats.norm.ppf(ps), rtol=2e-9, atol=1e-9)

    def test_antisymmetric(self):
        for p in (0.01, 0.1, 0.3):
            assert normal_quantile(p) == pytest.approx(-normal_quantile(1 - p), rel=1e-9)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.5, 2.0])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            normal_quantile(p)


class TestNormalityDiagnostic:
    def test_statistic_matches_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(3)
        for w in (rng.normal(size=135), rng.lognormal(size=135), rng.uniform(size=50)):
            res = normality_diagnostic(w)
            ref = scipy_stats.jarque_bera(w)
            assert res.statistic == pytest.approx(ref.statistic, rel=1e-9)
            assert res.p_like == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-300)

    def test_gaussian_monte_carlo_calibration(self):
        # the false-rejection rate at 0.05 should sit near (slightly under) 5%
        rng = np.random.default_rng(11)
        rejections = sum(normality_diagnostic(rng.normal(size=135)).p_like < 0.05 for _ in range(2000))
        assert 0.02 <= rejections / 2000 <= 0.08

    def test_rejects_heavy_tails(self):
        rng = np.random.default_rng(0)
        res = normality_diagnostic(rng.lognormal(sigma=1.0, size=135))
        assert res.p_like < 1e-6

    def test_constant_window(self):
        with pytest.raises(ValueError, match="zero-variance"):
            normality_diagnostic([2.0] * 20)

    def test_short_window(self):
        with pytest.raises(ValueError, match="at least 8"):
            normality_diagnostic([1.0, 2.0, 3.0])

    def test_nonfinite(self):
        with pytest.raises(ValueError):
            normality_diagnostic([1.0] * 10 + [math.nan])

    @settings(max_examples=30)
    @given(st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariant(self, scale, shift):
        w = np.random.default_rng(5).normal(size=60)
        a = normality_diagnostic(w).statistic
        b = normality_diagnostic(w * scale + shift).statistic
        assert b == pytest.approx(a, rel=1e-6, abs=1e-9)


class TestContractExamples:
    def test_alpha_half(self):
        s = ema_update(EmaState(mu=1.0, var=0.0, alpha=0.5), 3.0)
        assert (s.mu, s.var) == (2.0, 0.5)

    def test_fixed_point(self):
        s = ema_update(EmaState(mu=0.7, var=0.0, alpha=0.9), 0.7)
        assert s.mu == pytest.approx(0.7, rel=1e-15)
        assert s.var == pytest.approx(0.0, abs=1e-30)

    def test_drift_example(self):
        s = ema_update(EmaState(mu=0.8, var=0.04, alpha=0.97), 1.2)
        exact_mu, exact_var = _ema_exact(0.8, 0.04, 0.97, 1.2)
        assert s.mu == pytest.approx(float(exact_mu), rel=1e-14)
        assert s.var == pytest.approx(float(exact_var), rel=1e-13)
        assert s.mu == pytest.approx(0.812)
        # 0.97 * 0.04 + 0.03 * 0.388**2; a quoted 0.0426 does not follow from this formula
        assert s.var == pytest.approx(0.04331632, rel=1e-12)

    def test_z_examples(self):
        assert z_score(EmaState(mu=1.0, var=0.25), 2.0) == pytest.approx(2.0, abs=1e-5)
        assert z_score(EmaState(mu=1.0, var=0.25), 1.0) == 0.0
        assert z_score(EmaState(mu=0.5, var=0.0), 0.6) == pytest.approx(1e5, rel=1e-9)

    def test_warmup_small(self):
        s = warmup_finalize(WarmupBuffer(3, [1.0, 2.0, 3.0]))
        assert s.mu == 2.0
        assert s.var == pytest.approx(2.0 / 3.0, rel=1e-15)

    def test_warmup_constant(self):
        s = warmup_finalize(WarmupBuffer(4, [0.3] * 4))
        assert s.mu == pytest.approx(0.3, rel=1e-15)
        assert s.var == pytest.approx(0.0, abs=1e-30)

    def test_warmup_bit_for_bit(self):
        norms = np.random.default_rng(42).lognormal(size=25).tolist()
        s = warmup_finalize(WarmupBuffer(25, list(norms)))
        mean = 0.0
        for g in norms:
            mean += g
        mean /= 25
        var = 0.0
        for g in norms:
            var += (g - mean) ** 2
        var /= 25
        assert (s.mu, s.var) == (mean, var)

    def test_replay_equals_recurrence(self):
        norms = np.random.default_rng(1).uniform(0.5, 2.0, size=500).tolist()
        s = EmaState(mu=1.0, var=0.1, alpha=0.9)
        mu, var = 1.0, 0.1
        for g in norms:
            s = ema_update(s, g)
            mu = 0.9 * mu + (1.0 - 0.9) * g
            var = 0.9 * var + (1.0 - 0.9) * (g - mu) ** 2
        assert (s.mu, s.var) == (mu, var)

    def test_variance_order_matters(self):
        # updating the variance around the old mean would give a larger value
        s = ema_update(EmaState(mu=1.0, var=0.0, alpha=0.5), 3.0)
        old_mean_var = 0.5 * 0.0 + 0.5 * (3.0 - 1.0) ** 2
        assert s.var == 0.5
        assert old_mean_var == 2.0

    def test_quantile_monotone_grid(self):
        qs = [normal_quantile(p) for p in np.linspace(0.001, 0.999, 1000)]
        assert all(b > a for a, b in zip(qs, qs[1:]))

    def test_quantile_bisection_oracle(self):
        lo, hi = -10.0, 10.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if _phi(mid) < 0.975 else (lo, mid)
        assert normal_quantile(0.975) == pytest.approx(lo, abs=1e-6)

    def test_jb_zero_for_normal_moments(self):
        # symmetric (S=0) with kurtosis exactly 3: +-a with weight w and 0 elsewhere
        # kurtosis of {0 x 4, +-1 x 1} is (2/6) / (2/6)**2 = 3
        res = normality_diagnostic([0.0] * 4 + [1.0, -1.0] + [0.0] * 4 + [1.0, -1.0])
        assert res.statistic == pytest.approx(0.0, abs=1e-12)
        assert res.p_like == pytest.approx(1.0)

    def test_gaussian_seeds_mostly_pass(self):
        passes = sum(
            normality_diagnostic(np.random.default_rng(s).normal(size=135)).p_like > 0.05 for s in range(100)
        )
        assert passes >= 90

    def test_exponential_seeds_reject(self):
        rejects = sum(
            normality_diagnostic(np.random.default_rng(s).exponential(size=135)).p_like < 0.05 for s in range(100)
        )
        assert rejects >= 95
