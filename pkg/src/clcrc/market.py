"""Redispatch-market modeling.

Order-book ingestion filters, trading-window volume/VWAP aggregation,
Gaussian/student-t copula fitting of the joint (volume, price) distribution
with empirical marginals, copula sampling, and fast-forward scenario
reduction under a transport (Kantorovich) distance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import date, datetime, timedelta
from typing import Iterable, Sequence

import numpy as np
from scipy import special, stats
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

#: hours of delivery products per day
N_PRODUCTS = 24

#: gate closure lead time before delivery start
GATE_CLOSURE_LEAD_H = 0.75

#: minimum order lifetime kept by the anti-manipulation filter
MIN_LIFETIME_MIN = 15.0


@dataclass(frozen=True)
class OrderBookEntry:
    """One limit order for a specific delivery product hour."""

    order_id: str
    side: str                    # "buy" | "sell"
    delivery_date: date
    product_hour: int
    volume: float                # MWh, > 0
    limit_price: float           # EUR/MWh, may be negative
    submitted_at: datetime
    closed_at: datetime          # retraction or expiration time

    def __post_init__(self):
        if self.side not in ("buy", "sell"):
            raise ValueError(f"order {self.order_id}: side must be buy|sell")
        if self.volume <= 0:
            raise ValueError(f"order {self.order_id}: volume must be > 0")
        if self.closed_at < self.submitted_at:
            raise ValueError(f"order {self.order_id}: closed before submitted")
        if not 0 <= self.product_hour < N_PRODUCTS:
            raise ValueError(f"order {self.order_id}: product_hour out of range")

    @property
    def lifetime_minutes(self) -> float:
        return (self.closed_at - self.submitted_at).total_seconds() / 60.0

    def _rel_hours(self, t: datetime) -> float:
        midnight = datetime.combine(self.delivery_date, datetime.min.time())
        return (t - midnight).total_seconds() / 3600.0

    @property
    def submitted_h(self) -> float:
        """Submission time in hours relative to the delivery-day midnight."""
        return self._rel_hours(self.submitted_at)

    @property
    def closed_h(self) -> float:
        return self._rel_hours(self.closed_at)


def gate_closure_hour(product_hour: int) -> float:
    """Gate closure in hours relative to delivery-day midnight (delivery − 45 min)."""
    return product_hour - GATE_CLOSURE_LEAD_H


def filter_orders(orders: Iterable[OrderBookEntry]) -> list[OrderBookEntry]:
    """Apply the two volume-overestimation filters to an order book.

    Buy orders alive for less than 15 minutes are dropped (exactly 15 minutes
    is kept). Among orders with identical (side, delivery, hour, volume,
    price), any order submitted at or after the close of the group's earliest
    order is treated as a resubmission and dropped; time-overlapping
    duplicates are genuinely concurrent volume and stay. Idempotent.
    """
    alive = [
        o for o in orders
        if o.side != "buy" or o.lifetime_minutes >= MIN_LIFETIME_MIN - 1e-9
    ]
    groups: dict[tuple, list[OrderBookEntry]] = {}
    for o in alive:
        key = (o.side, o.delivery_date, o.product_hour, o.volume, o.limit_price)
        groups.setdefault(key, []).append(o)

    kept: list[OrderBookEntry] = []
    for group in groups.values():
        group.sort(key=lambda o: (o.submitted_at, o.order_id))
        first_close = group[0].closed_at
        kept.append(group[0])
        kept.extend(o for o in group[1:] if o.submitted_at < first_close)
    kept.sort(key=lambda o: (o.submitted_at, o.order_id))
    return kept


@dataclass(frozen=True)
class WindowStats:
    """Buy volume and VWAP of a trading window for one product."""

    volume: float
    vwap: float | None
    window_closed: bool = False


def window_aggregate(
    orders: Iterable[OrderBookEntry],
    window_start: float,
    product_hour: int,
) -> WindowStats:
    """Total buy volume and VWAP of orders active in ``[window_start, gate closure]``.

    ``window_start`` is in hours relative to the delivery-day midnight
    (negative values are on the day before). An order counts when its active
    interval intersects the window. Returns a distinct "window closed" flag
    when the window starts after gate closure.
    """
    gc = gate_closure_hour(product_hour)
    if window_start > gc:
        return WindowStats(0.0, None, window_closed=True)
    vol = 0.0
    pv = 0.0
    for o in orders:
        if o.side != "buy" or o.product_hour != product_hour:
            continue
        if o.submitted_h <= gc and o.closed_h >= window_start:
            vol += o.volume
            pv += o.volume * o.limit_price
    if vol <= 0.0:
        return WindowStats(0.0, None)
    return WindowStats(vol, pv / vol)


def book_snapshot(
    orders: Iterable[OrderBookEntry],
    at_hours: float,
    product_hour: int,
) -> WindowStats:
    """Buy volume/VWAP of orders active at one instant (start-of-window view)."""
    vol = 0.0
    pv = 0.0
    for o in orders:
        if o.side != "buy" or o.product_hour != product_hour:
            continue
        if o.submitted_h <= at_hours <= o.closed_h:
            vol += o.volume
            pv += o.volume * o.limit_price
    if vol <= 0.0:
        return WindowStats(0.0, None)
    return WindowStats(vol, pv / vol)


def day_feature_vector(orders: Sequence[OrderBookEntry], window_start: float) -> np.ndarray:
    """48-vector (24 volumes, 24 VWAPs) for one day's trading window.

    Products without orders (or with a closed window) get volume 0 and price
    NaN; imputation happens inside the copula fit.
    """
    out = np.full(2 * N_PRODUCTS, np.nan)
    for d in range(N_PRODUCTS):
        ws = window_aggregate(orders, window_start, d)
        out[d] = 0.0 if ws.window_closed else ws.volume
        out[N_PRODUCTS + d] = np.nan if ws.vwap is None else ws.vwap
    return out


@dataclass(frozen=True)
class MarketScenario:
    """One joint realization of buy volumes and prices over delivery hours."""

    buy_volume: dict[int, float]     # d -> MWh
    buy_price: dict[int, float]      # d -> EUR/MWh
    probability: float

    def __post_init__(self):
        if not 0.0 < self.probability <= 1.0 + 1e-12:
            raise ValueError("scenario probability must be in (0, 1]")
        if any(v < -1e-9 for v in self.buy_volume.values()):
            raise ValueError("buy volumes must be nonnegative")


# ---------------------------------------------------------------------------
# copula fitting and sampling
# ---------------------------------------------------------------------------

@dataclass
class CopulaModel:
    """Fitted copula over the active (non-degenerate) columns.

    Marginals are empirical: sorted per-column samples queried through linear
    interpolation. Degenerate columns are stored as constants and re-inserted
    at sampling time.
    """

    family: str                      # "gaussian" | "student_t"
    correlation: np.ndarray          # (k, k) over active columns
    dof: float | None
    marginals: list[np.ndarray]      # sorted raw samples per active column
    active_cols: np.ndarray          # indices into the full layout
    constant_cols: dict[int, float]
    n_cols: int
    bic: dict[str, float]

    def __post_init__(self):
        if self.family not in ("gaussian", "student_t"):
            raise ValueError("family must be gaussian|student_t")
        if self.family == "student_t" and (self.dof is None or self.dof <= 2):
            raise ValueError("student_t copula requires dof > 2")


def _nearest_correlation(R: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Symmetrize, clip eigenvalues, and rescale to unit diagonal."""
    R = 0.5 * (R + R.T)
    vals, vecs = np.linalg.eigh(R)
    R = (vecs * np.clip(vals, floor, None)) @ vecs.T
    d = np.sqrt(np.diag(R))
    R = R / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return 0.5 * (R + R.T)


def _pseudo_observations(x: np.ndarray) -> np.ndarray:
    ranks = np.apply_along_axis(stats.rankdata, 0, x)
    return ranks / (x.shape[0] + 1.0)


def _gaussian_copula_loglik(u: np.ndarray, R: np.ndarray) -> float:
    z = stats.norm.ppf(u)
    sign, logdet = np.linalg.slogdet(R)
    Rinv = np.linalg.inv(R)
    quad = np.einsum("ij,jk,ik->i", z, Rinv - np.eye(R.shape[0]), z)
    return float(-0.5 * (u.shape[0] * logdet + quad.sum()))


def _student_copula_loglik(u: np.ndarray, R: np.ndarray, nu: float) -> float:
    k = R.shape[0]
    x = stats.t.ppf(u, df=nu)
    sign, logdet = np.linalg.slogdet(R)
    Rinv = np.linalg.inv(R)
    quad = np.einsum("ij,jk,ik->i", x, Rinv, x)
    log_joint = (
        special.gammaln((nu + k) / 2.0)
        - special.gammaln(nu / 2.0)
        - 0.5 * k * math.log(nu * math.pi)
        - 0.5 * logdet
        - (nu + k) / 2.0 * np.log1p(quad / nu)
    )
    log_marg = stats.t.logpdf(x, df=nu).sum(axis=1)
    return float((log_joint - log_marg).sum())


def _kendall_correlation(x: np.ndarray) -> np.ndarray:
    k = x.shape[1]
    R = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            tau = stats.kendalltau(x[:, i], x[:, j]).statistic
            if not np.isfinite(tau):
                tau = 0.0
            R[i, j] = R[j, i] = math.sin(math.pi * tau / 2.0)
    return R


_NU_GRID = np.concatenate([np.arange(2.2, 10.2, 0.4), [12.0, 15.0, 20.0, 30.0, 50.0]])


def fit_copula(
    samples: np.ndarray,
    volume_cols: slice = slice(0, N_PRODUCTS),
    min_days: int = 50,
) -> CopulaModel:
    """Fit Gaussian and student-t copulas and keep the BIC-preferred family.

    ``samples`` is (n_days, n_cols); NaNs in volume columns are imputed as 0
    (no liquidity) and in price columns as the per-column median. Constant
    columns are excluded from the copula and re-inserted at sampling time.
    """
    x = np.array(samples, dtype=float)
    n, n_cols = x.shape
    if n < min_days:
        raise ValueError(f"need at least {min_days} sample days, got {n}")

    vol_mask = np.zeros(n_cols, dtype=bool)
    vol_mask[volume_cols] = True
    for j in range(n_cols):
        col = x[:, j]
        nan = np.isnan(col)
        if nan.any():
            if vol_mask[j]:
                col[nan] = 0.0
            else:
                med = np.nanmedian(col)
                col[nan] = 0.0 if np.isnan(med) else med

    spread = x.max(axis=0) - x.min(axis=0)
    active = np.nonzero(spread > 1e-12)[0]
    constant = {int(j): float(x[0, j]) for j in range(n_cols) if j not in set(active)}
    if len(active) < 2:
        # nothing to correlate; degenerate model sampling constants + marginals
        logger.warning("copula fit: fewer than 2 varying columns; independent fallback")
        marginals = [np.sort(x[:, j]) for j in active]
        return CopulaModel(
            "gaussian", np.eye(len(active)), None, marginals, active, constant, n_cols,
            {"gaussian": math.nan, "student_t": math.nan},
        )

    xa = x[:, active]
    u = _pseudo_observations(xa)
    k = len(active)

    z = stats.norm.ppf(u)
    R_gauss = _nearest_correlation(np.corrcoef(z, rowvar=False))
    ll_gauss = _gaussian_copula_loglik(u, R_gauss)
    k_gauss = k * (k - 1) / 2.0
    bic_gauss = -2.0 * ll_gauss + k_gauss * math.log(n)

    R_t = _nearest_correlation(_kendall_correlation(xa))
    lls = [_student_copula_loglik(u, R_t, nu) for nu in _NU_GRID]
    best = int(np.argmax(lls))
    nu, ll_t = float(_NU_GRID[best]), lls[best]
    bic_t = -2.0 * ll_t + (k_gauss + 1.0) * math.log(n)

    bics = {"gaussian": float(bic_gauss), "student_t": float(bic_t)}
    marginals = [np.sort(xa[:, j]) for j in range(k)]
    if bic_t < bic_gauss:
        return CopulaModel("student_t", R_t, max(nu, 2.1), marginals, active, constant, n_cols, bics)
    return CopulaModel("gaussian", R_gauss, None, marginals, active, constant, n_cols, bics)


def sample_market(
    model: CopulaModel,
    n: int,
    seed: int,
    volume_cols: slice = slice(0, N_PRODUCTS),
) -> np.ndarray:
    """Draw ``n`` joint samples mapped through the empirical marginals.

    Volumes are clamped at 0. Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    k = len(model.active_cols)
    out = np.zeros((n, model.n_cols))
    for j, v in model.constant_cols.items():
        out[:, j] = v

    if k > 0:
        L = np.linalg.cholesky(_nearest_correlation(model.correlation))
        z = rng.standard_normal((n, k)) @ L.T
        if model.family == "student_t":
            g = rng.chisquare(model.dof, size=n)
            z = z * np.sqrt(model.dof / g)[:, None]
            u = stats.t.cdf(z, df=model.dof)
        else:
            u = stats.norm.cdf(z)
        u = np.clip(u, 1e-9, 1 - 1e-9)
        for idx, j in enumerate(model.active_cols):
            out[:, j] = np.quantile(model.marginals[idx], u[:, idx], method="linear")

    vol = np.zeros(model.n_cols, dtype=bool)
    vol[volume_cols] = True
    out[:, vol] = np.clip(out[:, vol], 0.0, None)
    return out


# ---------------------------------------------------------------------------
# fast-forward scenario reduction
# ---------------------------------------------------------------------------

def build_cost_matrix(points: np.ndarray, metric: str = "standardized_euclidean") -> np.ndarray:
    """Pairwise scenario distances for the reduction/transport machinery."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if metric == "standardized_euclidean":
        sd = pts.std(axis=0)
        sd[sd <= 1e-12] = 1.0
        pts = (pts - pts.mean(axis=0)) / sd
    elif metric != "euclidean":
        raise ValueError(f"unknown metric: {metric}")
    return cdist(pts, pts)


def fast_forward_selection(
    cost: np.ndarray,
    m: int,
    weights: np.ndarray | None = None,
) -> tuple[list[int], np.ndarray]:
    """Greedy fast-forward selection of ``m`` scenarios.

    Iteratively adds the scenario that most reduces the transport distance
    between the kept set and the full set, then redistributes dropped
    probability mass to each scenario's nearest kept neighbor.
    """
    n = cost.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)

    selected: list[int] = []
    min_dist = np.full(n, np.inf)
    available = np.ones(n, dtype=bool)
    for _ in range(m):
        scores = np.minimum(min_dist[:, None], cost).T @ w
        scores[~available] = np.inf
        u = int(np.argmin(scores))
        selected.append(u)
        available[u] = False
        min_dist = np.minimum(min_dist, cost[:, u])

    sel = np.array(selected)
    probs = w[sel].copy()
    dropped = np.nonzero(available)[0]
    if dropped.size:
        nearest = np.argmin(cost[np.ix_(dropped, sel)], axis=1)
        np.add.at(probs, nearest, w[dropped])
    return selected, probs


def kantorovich_distance(cost: np.ndarray, weights: np.ndarray, selected: Sequence[int]) -> float:
    """Transport distance between the full set and a subset with optimal mass moves."""
    sel = np.asarray(list(selected), dtype=int)
    return float(weights @ np.min(cost[:, sel], axis=1))


def reduce_scenarios(
    samples: np.ndarray,
    m: int,
    metric: str = "standardized_euclidean",
    hours: Sequence[int] | None = None,
) -> list[MarketScenario]:
    """Reduce copula samples to ``m`` representative market scenarios.

    ``samples`` is (n, 48): 24 buy volumes then 24 prices. ``hours``
    restricts the scenario maps to the given delivery hours (typically D+).
    """
    pts = np.asarray(samples, dtype=float)
    cost = build_cost_matrix(pts, metric)
    selected, probs = fast_forward_selection(cost, m)
    hrs = list(range(N_PRODUCTS)) if hours is None else sorted(hours)
    out = []
    for idx, p in zip(selected, probs):
        vol = {d: max(float(pts[idx, d]), 0.0) for d in hrs}
        price = {d: float(pts[idx, N_PRODUCTS + d]) for d in hrs}
        out.append(MarketScenario(vol, price, float(p)))
    total = sum(s.probability for s in out)
    if abs(total - 1.0) > 1e-9:
        raise AssertionError(f"reduced probabilities sum to {total}")
    return out
