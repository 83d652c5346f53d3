import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from epimix.scoring import (
    ScoringError,
    coverage,
    dss,
    lppd,
    predictive_moments,
    rps,
    rps_bruteforce,
    rps_columns,
    waic,
)


class TestWAIC:
    def test_hand_value(self):
        ll = np.log([[0.2], [0.4]])
        assert lppd(ll) == pytest.approx(math.log(0.3))
        w, p = waic(ll)
        assert p == pytest.approx(np.var(np.log([0.2, 0.4]), ddof=1))
        assert w == pytest.approx(-2 * (math.log(0.3) - p))

    def test_identical_draws(self, rng):
        ll = np.tile(rng.normal(-3, 1, 7), (5, 1))
        w, p = waic(ll)
        assert p == pytest.approx(0.0, abs=1e-20)
        assert w == pytest.approx(-2 * ll[0].sum())

    def test_constant_shift(self, rng):
        ll = rng.normal(-2, 0.5, (50, 12))
        w0, p0 = waic(ll)
        w1, p1 = waic(ll + 0.7)
        assert lppd(ll + 0.7) == pytest.approx(lppd(ll) + 0.7 * 12)
        assert p1 == pytest.approx(p0)
        assert w1 < w0

    def test_trailing_axes_flattened(self, rng):
        ll = rng.normal(size=(10, 3, 4))
        assert waic(ll) == pytest.approx(waic(ll.reshape(10, 12)))

    def test_needs_two_draws(self):
        with pytest.raises(ScoringError):
            waic(np.zeros((1, 4)))

    def test_stable_for_large_magnitudes(self):
        ll = np.array([[-2000.0], [-2001.0]])
        assert np.isfinite(waic(ll)[0])


class TestRPS:
    def test_point_mass_at_truth(self):
        assert rps([4, 4, 4], 4) == 0.0

    def test_uniform_three_points(self):
        assert rps([0, 1, 2], 1) == pytest.approx(2 / 9)

    @given(st.lists(st.integers(0, 60), min_size=1, max_size=80), st.integers(0, 80))
    @settings(max_examples=150, deadline=None)
    def test_matches_cumulative_sum(self, draws, y):
        assert rps(draws, y) == pytest.approx(rps_bruteforce(draws, y), abs=1e-10)
        assert rps(draws, y) >= 0

    def test_zero_only_for_point_mass(self):
        assert rps([3, 4], 3) > 0

    def test_converges_to_poisson_closed_form(self):
        y = 2
        k = np.arange(0, 80)
        exact = float(np.sum((stats.poisson.cdf(k, 3.0) - (y <= k)) ** 2))
        draws = np.random.default_rng(2024).poisson(3.0, 100_000)
        assert abs(rps(draws, y) - exact) < 0.01

    def test_columns_agree_with_scalar(self, rng):
        draws = rng.poisson(5, (300, 4, 3))
        y = rng.poisson(5, (4, 3))
        out = rps_columns(draws, y)
        for i in range(4):
            for t in range(3):
                assert out[i, t] == pytest.approx(rps(draws[:, i, t], y[i, t]), abs=1e-10)

    def test_empty(self):
        with pytest.raises(ScoringError):
            rps([], 1)


class TestDSS:
    def test_unit_case(self):
        assert dss(5.0, 1.0, 5.0) == 0.0

    def test_sigma_e(self):
        assert dss(3.0, math.e**2, 3.0) == pytest.approx(2.0)

    def test_minimiser_over_variance(self):
        mu, y = 2.0, 5.0
        grid = np.linspace(0.5, 30, 100_000)
        best = grid[np.argmin(dss(mu, grid, y))]
        assert best == pytest.approx((y - mu) ** 2, abs=1e-3)

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0.01, 1e3), st.floats(-1e3, 1e3))
    @settings(max_examples=80, deadline=None)
    def test_shift_invariant(self, mu, y, var, c):
        assert dss(mu + c, var, y + c) == pytest.approx(dss(mu, var, y), rel=1e-6, abs=1e-6)

    def test_zero_variance(self):
        with pytest.raises(ScoringError):
            dss(1.0, 0.0, 1.0)


class TestCoverage:
    @pytest.mark.parametrize(
        "low, high, actual, hit",
        [
            (154018, 175048, 155181, True),
            (194169, 214482, 210099, True),
            (0, 1, 2, False),
            (3, 3, 3, True),
        ],
    )
    def test_cases(self, low, high, actual, hit):
        assert coverage(low, high, actual) is hit

    def test_inverted(self):
        with pytest.raises(ScoringError, match="inverted"):
            coverage(2, 1, 1)


def test_predictive_moments_match_mixture_sampling():
    rng = np.random.default_rng(9)
    mu = rng.uniform(2, 30, (40, 3))
    psi = rng.uniform(1, 10, 40)
    mean, var = predictive_moments(mu, psi)
    reps = 5000
    shape = np.repeat(psi, reps)[:, None]
    draws = rng.negative_binomial(shape, shape / (shape + np.repeat(mu, reps, axis=0)))
    assert np.allclose(mean, draws.mean(axis=0), rtol=0.02)
    assert np.allclose(var, draws.var(axis=0), rtol=0.05)
