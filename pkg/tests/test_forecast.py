from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest

from clcrc.fleet import FleetEnvelope
from clcrc.forecast import (
    EvScenarioSet,
    Var1ErrorModel,
    fit_baseline_forecaster,
    fit_error_model,
    observed_hour_count,
    relative_errors,
    sample_ev_scenarios,
    select_lag,
)
from conftest import random_fleet


def make_env(scale: float = 1.0, H: int = 24) -> FleetEnvelope:
    t = np.arange(1, H + 1, dtype=float)
    e_hi = scale * np.minimum(t / 12.0, 1.0)
    e_lo = scale * np.clip((t - 8) / 12.0, 0.0, 1.0)
    p_max = np.full(H, scale * 0.2)
    return FleetEnvelope(e_lo, e_hi, p_max)


def simulate_var(A, c, chol, T, seed, k=3):
    rng = np.random.default_rng(seed)
    y = np.zeros((T, k))
    state = np.zeros(k)
    for t in range(T):
        state = c + A @ state + chol @ rng.standard_normal(k)
        y[t] = state
    return y


class TestBaselineForecaster:
    def _training_days(self, env_by_dow, n_days=35, start=date(2017, 1, 2)):
        return {
            start + timedelta(days=i): env_by_dow[(start + timedelta(days=i)).weekday()]
            for i in range(n_days)
        }

    def test_constant_training_data_reproduced(self):
        env = make_env()
        days = self._training_days({d: env for d in range(7)})
        fc = fit_baseline_forecaster(days)
        pred = fc.predict(date(2017, 3, 1), -16.0)
        np.testing.assert_allclose(pred.as_matrix(), env.as_matrix(), atol=1e-9)

    def test_day_of_week_profiles_recovered(self):
        weekday, weekend = make_env(1.0), make_env(2.0)
        by_dow = {d: (weekend if d >= 5 else weekday) for d in range(7)}
        days = self._training_days(by_dow, n_days=28)
        fc = fit_baseline_forecaster(days)
        sat = date(2017, 3, 4)
        assert sat.weekday() == 5
        np.testing.assert_allclose(fc.predict(sat, -16.0).e_hi, weekend.e_hi, atol=1e-9)
        mon = date(2017, 3, 6)
        np.testing.assert_allclose(fc.predict(mon, -16.0).e_hi, weekday.e_hi, atol=1e-9)

    def test_alternating_14_day_mean_check(self):
        # two alternating profiles; day-of-week mean must match the matching profile
        a, b = make_env(1.0), make_env(1.5)
        start = date(2017, 1, 2)
        days = {}
        for i in range(14):
            day = start + timedelta(days=i)
            days[day] = a if day.weekday() % 2 == 0 else b
        fc = fit_baseline_forecaster(days)
        target = start + timedelta(days=14)  # Monday -> profile a
        np.testing.assert_allclose(fc.predict(target, -16.0).e_hi, a.e_hi, atol=1e-9)

    def test_nowcast_consistency(self):
        env = make_env()
        days = self._training_days({d: env for d in range(7)})
        fc = fit_baseline_forecaster(days)
        observed = make_env(1.3)
        pred = fc.predict(date(2017, 3, 1), forecast_time=9.0, observed=observed)
        np.testing.assert_allclose(pred.as_matrix()[:9], observed.as_matrix()[:9], atol=1e-9)
        # cumulative continuity at the splice point
        assert pred.e_hi[9] >= pred.e_hi[8] - 1e-9

    def test_refuses_below_seven_days(self):
        env = make_env()
        days = {date(2017, 1, 2) + timedelta(days=i): env for i in range(6)}
        with pytest.raises(ValueError):
            fit_baseline_forecaster(days)

    def test_prediction_satisfies_invariants(self):
        days = {date(2017, 1, 2) + timedelta(days=i): random_fleet(i) for i in range(30)}
        fc = fit_baseline_forecaster(days)
        assert fc.predict(date(2017, 3, 1), -16.0).check() == []


class TestVar1Fit:
    def test_recovery_synthetic(self):
        A = 0.5 * np.eye(3)
        chol = 0.1 * np.eye(3)
        y = simulate_var(A, np.zeros(3), chol, 10_000, seed=0)
        model = fit_error_model(y)
        np.testing.assert_allclose(model.coef, A, atol=0.05)
        np.testing.assert_allclose(model.intercept, 0.0, atol=0.02)
        np.testing.assert_allclose(model.noise_cov, 0.01 * np.eye(3), atol=0.005)

    def test_iid_errors_give_near_zero_coef(self):
        y = np.random.default_rng(1).normal(0, 0.1, (5000, 3))
        model = fit_error_model(y)
        np.testing.assert_allclose(model.coef, 0.0, atol=0.05)

    def test_constant_zero_errors_degenerate(self):
        model = fit_error_model(np.zeros((200, 3)))
        assert model.ridge_used
        np.testing.assert_allclose(model.coef, 0.0, atol=1e-12)
        np.testing.assert_allclose(model.intercept, 0.0, atol=1e-12)
        np.testing.assert_allclose(model.noise_cov, 0.0, atol=1e-12)

    def test_segments_do_not_cross_days(self):
        # two segments with wildly different levels; crossing them would bias A
        seg1 = np.full((50, 3), 10.0) + np.random.default_rng(2).normal(0, 0.01, (50, 3))
        seg2 = np.full((50, 3), -10.0) + np.random.default_rng(3).normal(0, 0.01, (50, 3))
        model = fit_error_model([seg1, seg2])
        assert model.spectral_radius < 1.5  # sane fit, no cross-segment jump regression

    def test_too_few_observations(self):
        with pytest.raises(ValueError):
            fit_error_model(np.zeros((10, 3)))


class TestLagSelection:
    def test_var1_data_selects_one(self):
        A = 0.6 * np.eye(3)
        y = simulate_var(A, np.zeros(3), 0.1 * np.eye(3), 3000, seed=4)
        assert select_lag(y, max_lag=4) == 1

    def test_white_noise_selects_one(self):
        y = np.random.default_rng(5).normal(0, 1, (2000, 3))
        assert select_lag(y, max_lag=4) == 1

    def test_var2_data_selects_two(self):
        rng = np.random.default_rng(6)
        T = 4000
        y = np.zeros((T, 3))
        A1 = 0.1 * np.eye(3)
        A2 = 0.75 * np.eye(3)
        for t in range(2, T):
            y[t] = A1 @ y[t - 1] + A2 @ y[t - 2] + 0.1 * rng.standard_normal(3)
        assert select_lag(y, max_lag=4) == 2

    def test_insufficient_data_reduces_max_lag(self, caplog):
        y = np.random.default_rng(7).normal(0, 1, (40, 3))
        with caplog.at_level("WARNING"):
            lag = select_lag(y, max_lag=12)
        assert lag >= 1
        assert "reducing" in caplog.text


class TestSampling:
    def _model(self, sd=0.05, a=0.3):
        return Var1ErrorModel(a * np.eye(3), np.zeros(3), sd**2 * np.eye(3))

    def test_zero_noise_reproduces_forecast(self):
        model = Var1ErrorModel(np.zeros((3, 3)), np.zeros(3), np.zeros((3, 3)))
        fc = make_env()
        out = sample_ev_scenarios(fc, model, n=5, seed=0)
        for s in out.scenarios:
            np.testing.assert_allclose(s.as_matrix(), fc.as_matrix(), atol=1e-9)

    def test_equiprobability(self):
        out = sample_ev_scenarios(make_env(), self._model(), n=7, seed=1)
        assert out.probability == pytest.approx(1 / 7)

    def test_reproducible(self):
        fc = make_env()
        a = sample_ev_scenarios(fc, self._model(), n=4, seed=42)
        b = sample_ev_scenarios(fc, self._model(), n=4, seed=42)
        for s, t in zip(a.scenarios, b.scenarios):
            np.testing.assert_array_equal(s.as_matrix(), t.as_matrix())

    def test_monte_carlo_mean_converges(self):
        # strictly increasing envelope: the repair projection is unbiased there,
        # so the sample mean must track the forecast
        H = 24
        hi = np.cumsum(np.linspace(0.3, 1.0, H))
        hi /= hi[-1]
        lo = 0.8 * hi
        fc = FleetEnvelope(lo, hi, np.full(H, 0.3))
        out = sample_ev_scenarios(fc, self._model(sd=0.05, a=0.0), n=10_000, seed=3)
        mean = np.mean([s.as_matrix() for s in out.scenarios], axis=0)
        ref = fc.as_matrix()
        scale = np.maximum(np.abs(ref), 0.01 * ref.max())
        assert np.max(np.abs(mean - ref) / scale) < 0.01

    def test_observed_hours_collapse(self):
        fc = make_env()
        out = sample_ev_scenarios(fc, self._model(sd=0.2), n=20, seed=4, observed_hours=9)
        for s in out.scenarios:
            np.testing.assert_allclose(s.as_matrix()[:9], fc.as_matrix()[:9], atol=1e-12)
        spread = np.std([s.e_hi[12] for s in out.scenarios])
        assert spread > 0

    def test_scenarios_satisfy_invariants(self):
        out = sample_ev_scenarios(make_env(), self._model(sd=0.4), n=50, seed=5)
        for s in out.scenarios:
            assert s.check() == []


def test_observed_hour_count():
    assert observed_hour_count(-16.0, 24) == 0
    assert observed_hour_count(0.0, 24) == 0
    assert observed_hour_count(9.0, 24) == 9
    assert observed_hour_count(9.5, 24) == 10
    assert observed_hour_count(30.0, 24) == 24


def test_relative_errors_floor_near_zero_hours():
    fc = make_env()
    actual = make_env(1.2)
    err = relative_errors(actual, fc)
    assert np.all(np.isfinite(err))
