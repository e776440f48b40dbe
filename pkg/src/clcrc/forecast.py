"""Fleet-envelope forecasting and EV scenario generation.

A pluggable point forecaster (day-of-week mean baseline with observation
splicing) plus VAR(1) models on relative forecast errors, sampled into
equiprobable envelope scenarios. Forecast times are hours relative to the
delivery-day midnight: 8:00 on the day before is -16.0, 9:00 on the day
itself is 9.0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import date
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy import linalg as sla

from .fleet import FleetEnvelope, repair_envelope

logger = logging.getLogger(__name__)

#: forecast time of the day-ahead (CLC) decision stage: 8:00 on day D-1
STAGE1_FORECAST_TIME = -16.0

#: fraction of the daily scale used as the floor of relative-error denominators
_SCALE_FLOOR_FRAC = 0.01


class Forecaster(Protocol):
    """Point predictor of the fleet envelope for a given day and forecast time."""

    def predict(
        self,
        day: date,
        forecast_time: float,
        observed: FleetEnvelope | None = None,
    ) -> FleetEnvelope: ...


def observed_hour_count(forecast_time: float, n_hours: int) -> int:
    """Number of leading delivery hours fully realized at ``forecast_time``."""
    if forecast_time <= 0:
        return 0
    return min(n_hours, int(math.ceil(forecast_time)))


@dataclass
class BaselineForecaster:
    """Per-hour mean envelope by calendar group, spliced with observations.

    For forecast times inside day D the already-realized hours are copied
    from the observation and the cumulative series of the remaining hours are
    shifted to connect continuously to the last observed value.
    """

    profiles: dict[int, np.ndarray]     # group key -> (H, 3) mean of [e_lo, e_hi, p_max]
    overall: np.ndarray                 # (H, 3) mean over all training days
    group_by: str = "day_of_week"
    delta_t: float = 1.0

    def predict(
        self,
        day: date,
        forecast_time: float,
        observed: FleetEnvelope | None = None,
    ) -> FleetEnvelope:
        key = _group_key(day, self.group_by)
        base = self.profiles.get(key, self.overall).copy()
        H = base.shape[0]
        n_obs = observed_hour_count(forecast_time, H)
        if observed is None or n_obs == 0:
            return repair_envelope(base[:, 0], base[:, 1], base[:, 2], self.delta_t)
        obs = observed.as_matrix()
        if n_obs < H:
            # re-anchor cumulative columns to connect to the last observation
            offset = obs[n_obs - 1, :2] - base[n_obs - 1, :2]
            base[n_obs:, :2] += offset
        base[:n_obs] = obs[:n_obs]
        return repair_envelope(
            base[:, 0], base[:, 1], base[:, 2], self.delta_t, freeze_prefix=n_obs
        )


def _group_key(day: date, group_by: str) -> int:
    if group_by == "day_of_week":
        return day.weekday()
    if group_by == "weekend":
        return int(day.weekday() >= 5)
    return 0


def fit_baseline_forecaster(
    training_days: Mapping[date, FleetEnvelope],
    group_by: str = "day_of_week",
) -> BaselineForecaster:
    """Fit the calendar-mean baseline forecaster.

    Refuses to fit on fewer than 7 days; warns below the recommended 28.
    """
    if len(training_days) < 7:
        raise ValueError(f"need at least 7 training days, got {len(training_days)}")
    if len(training_days) < 28:
        logger.warning("baseline forecaster fitted on only %d days (< 28)", len(training_days))

    stacks: dict[int, list[np.ndarray]] = {}
    everything = []
    first = next(iter(training_days.values()))
    for day, env in training_days.items():
        m = env.as_matrix()
        stacks.setdefault(_group_key(day, group_by), []).append(m)
        everything.append(m)
    profiles = {k: np.mean(v, axis=0) for k, v in stacks.items()}
    overall = np.mean(everything, axis=0)
    return BaselineForecaster(profiles, overall, group_by, first.delta_t)


@dataclass(frozen=True)
class Var1ErrorModel:
    """VAR(1) model of the 3-vector relative forecast errors.

    ``e_d = intercept + coef @ e_{d-1} + noise``, noise ~ N(0, noise_cov).
    """

    coef: np.ndarray        # (3, 3)
    intercept: np.ndarray   # (3,)
    noise_cov: np.ndarray   # (3, 3), symmetric PSD
    ridge_used: bool = False

    def __post_init__(self):
        for name in ("coef", "intercept", "noise_cov"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not np.allclose(self.noise_cov, self.noise_cov.T, atol=1e-9):
            raise ValueError("noise covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (self.noise_cov + self.noise_cov.T))) < -1e-9:
            raise ValueError("noise covariance must be positive semidefinite")
        if self.spectral_radius >= 1.0:
            logger.warning(
                "VAR(1) coefficient spectral radius %.3f >= 1: non-stationary sampling",
                self.spectral_radius,
            )

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.coef))))

    @property
    def is_stable(self) -> bool:
        return self.spectral_radius < 1.0

    def stationary_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Stationary mean and covariance (mean/zero-cov fallback if unstable)."""
        k = len(self.intercept)
        if not self.is_stable:
            return np.zeros(k), np.zeros((k, k))
        mean = np.linalg.solve(np.eye(k) - self.coef, self.intercept)
        cov = sla.solve_discrete_lyapunov(self.coef, self.noise_cov)
        return mean, 0.5 * (cov + cov.T)


def _as_segments(errors) -> list[np.ndarray]:
    """Normalize error input to a list of (T_i, k) day segments."""
    if isinstance(errors, np.ndarray) and errors.ndim == 2:
        return [errors.astype(float)]
    segs = [np.asarray(seg, dtype=float) for seg in errors]
    if segs and segs[0].ndim == 1:  # a single sequence of vectors
        return [np.asarray(errors, dtype=float)]
    return segs


def _var_design(segments: list[np.ndarray], lag: int, burn: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack within-segment regressions y_t ~ [1, y_{t-1}, ..., y_{t-lag}].

    ``burn`` rows are dropped at the start of each segment so that models of
    different lags can be compared on the same sample.
    """
    xs, ys = [], []
    for seg in segments:
        T = seg.shape[0]
        for t in range(max(lag, burn), T):
            row = [1.0]
            for j in range(1, lag + 1):
                row.extend(seg[t - j])
            xs.append(row)
            ys.append(seg[t])
    if not xs:
        raise ValueError("no usable observations for the requested lag")
    return np.asarray(xs), np.asarray(ys)


def _fit_var_ls(X: np.ndarray, Y: np.ndarray, ridge: float = 1e-8):
    """Least-squares VAR fit; falls back to fixed-ridge when X is singular."""
    ridge_used = False
    if np.linalg.matrix_rank(X) < X.shape[1]:
        ridge_used = True
        logger.warning("VAR design matrix singular; applying ridge %.0e", ridge)
        B = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ Y)
    else:
        B, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ B
    cov = resid.T @ resid / resid.shape[0]
    return B, 0.5 * (cov + cov.T), ridge_used


def fit_error_model(errors, min_obs: int = 30) -> Var1ErrorModel:
    """Least-squares VAR(1) fit on relative forecast errors.

    ``errors`` is a (T, 3) array or a list of per-day (T_i, 3) segments;
    transitions never cross segment boundaries.
    """
    segments = _as_segments(errors)
    n_obs = sum(max(0, s.shape[0] - 1) for s in segments)
    if n_obs < min_obs:
        raise ValueError(f"need at least {min_obs} error transitions, got {n_obs}")
    X, Y = _var_design(segments, lag=1, burn=1)
    B, cov, ridge_used = _fit_var_ls(X, Y)
    return Var1ErrorModel(B[1:].T, B[0], cov, ridge_used)


def _bic(X: np.ndarray, Y: np.ndarray) -> float:
    _, cov, _ = _fit_var_ls(X, Y)
    n, k = Y.shape
    sign, logdet = np.linalg.slogdet(cov + 1e-12 * np.eye(k))
    n_params = X.shape[1] * k
    return float(n * logdet + n_params * math.log(n))


def select_lag(errors, max_lag: int = 4) -> int:
    """Smallest-BIC VAR lag order, ties broken toward smaller lags.

    All candidate lags are fitted on the common sample (rows lost to
    ``max_lag``) so their likelihoods are comparable. If the data cannot
    support ``max_lag``, it is reduced with a warning.
    """
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    segments = _as_segments(errors)
    k = segments[0].shape[1]
    while max_lag > 1:
        rows = sum(max(0, s.shape[0] - max_lag) for s in segments)
        if rows >= (1 + k * max_lag) + 5:
            break
        logger.warning("insufficient data for lag %d; reducing", max_lag)
        max_lag -= 1

    bics = []
    for lag in range(1, max_lag + 1):
        X, Y = _var_design(segments, lag=lag, burn=max_lag)
        bics.append(_bic(X, Y))
    return int(np.argmin(bics)) + 1


def relative_error_scale(forecast: FleetEnvelope) -> np.ndarray:
    """Denominators for relative errors on the three envelope series.

    Cumulative envelopes start near zero, so each series is floored at 1% of
    its daily scale (final fast-as-possible energy; peak connected power).
    """
    m = forecast.as_matrix().copy()
    e_floor = max(_SCALE_FLOOR_FRAC * float(forecast.e_hi[-1]), 1e-9)
    p_floor = max(_SCALE_FLOOR_FRAC * float(np.max(forecast.p_max, initial=0.0)), 1e-9)
    m[:, 0] = np.maximum(m[:, 0], e_floor)
    m[:, 1] = np.maximum(m[:, 1], e_floor)
    m[:, 2] = np.maximum(m[:, 2], p_floor)
    return m


def relative_errors(actual: FleetEnvelope, forecast: FleetEnvelope) -> np.ndarray:
    """(H, 3) relative errors of a forecast against the realized envelope."""
    scale = relative_error_scale(forecast)
    return (actual.as_matrix() - forecast.as_matrix()) / scale


@dataclass(frozen=True)
class EvScenarioSet:
    """Equiprobable envelope scenarios for one day and forecast time."""

    scenarios: tuple[FleetEnvelope, ...]
    forecast_time: float

    @property
    def probability(self) -> float:
        return 1.0 / len(self.scenarios)

    def __len__(self) -> int:
        return len(self.scenarios)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_ev_scenarios(
    forecast: FleetEnvelope,
    model: Var1ErrorModel,
    n: int,
    seed: int,
    observed_hours: int = 0,
    forecast_time: float | None = None,
) -> EvScenarioSet:
    """Sample ``n`` equiprobable envelope scenarios around a point forecast.

    VAR(1) error paths are applied multiplicatively via the relative-error
    scale; hours before ``observed_hours`` carry zero error (they are already
    realized). Every scenario is projected back onto the envelope invariants.
    Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    H = forecast.n_hours
    h0 = int(np.clip(observed_hours, 0, H))
    scale = relative_error_scale(forecast)
    base = forecast.as_matrix()

    noise_sqrt = _psd_sqrt(model.noise_cov)
    if h0 > 0:
        init_mean, init_cov = np.zeros(3), np.zeros((3, 3))
    else:
        init_mean, init_cov = model.stationary_moments()
    init_sqrt = _psd_sqrt(init_cov)

    scenarios = []
    if forecast_time is None:
        forecast_time = STAGE1_FORECAST_TIME if h0 == 0 else float(h0)
    for _ in range(n):
        err = np.zeros((H, 3))
        state = init_mean + init_sqrt @ rng.standard_normal(3)
        for d in range(h0, H):
            state = model.intercept + model.coef @ state + noise_sqrt @ rng.standard_normal(3)
            err[d] = state
        values = base + err * scale
        scenarios.append(
            repair_envelope(
                values[:, 0], values[:, 1], values[:, 2], forecast.delta_t, freeze_prefix=h0
            )
        )
    return EvScenarioSet(tuple(scenarios), float(forecast_time))
