"""EV fleet virtual-battery model.

Aggregates individual charging sessions into three fleet-level time series —
lower/upper cumulative-energy envelopes and a maximum-power profile — and
evaluates the fleet's closed-form charging response under capacity caps.
All quantities are in MW / MWh / hours.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

#: numerical slack used when checking envelope invariants
_TOL = 1e-9


@dataclass(frozen=True)
class ChargingSession:
    """One plug-in interval of a single EV.

    Times are in hours relative to the start of the aggregation horizon
    (fractional values allowed; sessions are aligned/clipped on ingest).
    """

    vehicle_id: str
    arrival: float
    departure: float
    energy_demand: float  # MWh
    max_power: float      # MW

    def __post_init__(self):
        if not self.departure > self.arrival:
            raise ValueError(
                f"session {self.vehicle_id}: departure must be after arrival "
                f"({self.arrival} .. {self.departure})"
            )
        if self.max_power <= 0:
            raise ValueError(f"session {self.vehicle_id}: max_power must be > 0")
        if self.energy_demand < -_TOL:
            raise ValueError(f"session {self.vehicle_id}: negative energy demand")

    @property
    def feasible(self) -> bool:
        """Demand must fit in the plug-in window at max power."""
        return self.energy_demand <= self.max_power * (self.departure - self.arrival) + _TOL


@dataclass(frozen=True)
class FleetEnvelope:
    """Virtual-battery aggregation of a fleet over one day.

    ``e_lo``/``e_hi`` are cumulative energies at the END of each hour under
    the slow-as-possible / fast-as-possible strategies; ``p_max`` is the sum
    of connected charger powers per hour.
    """

    e_lo: np.ndarray
    e_hi: np.ndarray
    p_max: np.ndarray
    delta_t: float = 1.0

    def __post_init__(self):
        for name in ("e_lo", "e_hi", "p_max"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.e_lo) == len(self.e_hi) == len(self.p_max)):
            raise ValueError("envelope series must share one horizon length")

    @property
    def n_hours(self) -> int:
        return len(self.e_hi)

    @property
    def slow_peak(self) -> float:
        """Maximum hourly power of the slow-as-possible schedule."""
        return float(np.max(np.diff(self.e_lo, prepend=0.0)) / self.delta_t)

    @property
    def fast_profile(self) -> np.ndarray:
        """Hourly power of the fast-as-possible schedule."""
        return np.diff(self.e_hi, prepend=0.0) / self.delta_t

    def check(self, tol: float = 1e-6) -> list[str]:
        """Return a list of violated invariants (empty when valid)."""
        bad = []
        dlo = np.diff(self.e_lo, prepend=0.0)
        dhi = np.diff(self.e_hi, prepend=0.0)
        if np.any(dlo < -tol):
            bad.append("e_lo not nondecreasing")
        if np.any(dhi < -tol):
            bad.append("e_hi not nondecreasing")
        if np.any(self.e_lo > self.e_hi + tol):
            bad.append("e_lo exceeds e_hi")
        if np.any(dhi > self.p_max * self.delta_t + tol):
            bad.append("e_hi step exceeds p_max * delta_t")
        if np.any(dlo > self.p_max * self.delta_t + tol):
            bad.append("e_lo step exceeds p_max * delta_t")
        if np.any(self.p_max < -tol):
            bad.append("negative p_max")
        return bad

    def as_matrix(self) -> np.ndarray:
        """(n_hours, 3) matrix with columns e_lo, e_hi, p_max."""
        return np.column_stack([self.e_lo, self.e_hi, self.p_max])


@dataclass(frozen=True)
class LoadTrace:
    """Realized hourly charging power and cumulative energy of the fleet."""

    power: np.ndarray
    energy: np.ndarray
    unserved_energy: float
    clamped_hours: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for name in ("power", "energy"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def clip_session(session: ChargingSession, n_hours: int) -> ChargingSession | None:
    """Clip a session to the horizon ``[0, n_hours)``.

    Sessions spanning the horizon boundary keep a demand prorated by the
    clipped/full duration ratio, capped at what the clipped window can
    physically deliver. Returns None if the session has no overlap.
    """
    a = max(session.arrival, 0.0)
    b = min(session.departure, float(n_hours))
    if b <= a:
        return None
    if a == session.arrival and b == session.departure:
        return session
    frac = (b - a) / (session.departure - session.arrival)
    demand = min(session.energy_demand * frac, session.max_power * (b - a))
    return ChargingSession(session.vehicle_id, a, b, demand, session.max_power)


def aggregate_sessions(
    sessions: Iterable[ChargingSession],
    n_hours: int = 24,
    delta_t: float = 1.0,
) -> FleetEnvelope:
    """Aggregate charging sessions into the fleet envelope.

    ``e_hi[d]`` is the fleet's cumulative energy at the end of hour ``d`` when
    every EV charges as fast as possible from arrival; ``e_lo[d]`` when every
    EV defers charging as late as possible while completing by departure;
    ``p_max[d]`` is the raw sum of charger powers of EVs whose session
    overlaps any part of hour ``d`` (no envelope-step capping applied).

    Sessions ending before the horizon start are skipped with a warning
    count; sessions whose demand cannot fit their window are rejected
    (logged with the vehicle id) and excluded.
    """
    kept: list[ChargingSession] = []
    n_skipped = 0
    rejected: list[str] = []
    for s in sessions:
        if s.departure <= 0.0:
            n_skipped += 1
            continue
        if not s.feasible:
            rejected.append(s.vehicle_id)
            continue
        c = clip_session(s, n_hours)
        if c is None:
            n_skipped += 1
        else:
            kept.append(c)
    if n_skipped:
        logger.warning("aggregate_sessions: skipped %d sessions outside the horizon", n_skipped)
    if rejected:
        logger.warning(
            "aggregate_sessions: rejected %d infeasible sessions (ids: %s%s)",
            len(rejected), ", ".join(rejected[:5]), "…" if len(rejected) > 5 else "",
        )

    e_lo = np.zeros(n_hours)
    e_hi = np.zeros(n_hours)
    p_max = np.zeros(n_hours)
    if not kept:
        return FleetEnvelope(e_lo, e_hi, p_max, delta_t)

    a = np.array([s.arrival for s in kept])
    b = np.array([s.departure for s in kept])
    e = np.array([s.energy_demand for s in kept])
    p = np.array([s.max_power for s in kept])

    # end-of-hour timestamps; fast = charge from arrival, slow = finish at departure
    t_end = np.arange(1, n_hours + 1, dtype=float)[:, None]          # (H, 1)
    charge_time = np.clip(np.minimum(b, t_end) - a, 0.0, None)        # time available up to t
    fast = np.minimum(e, p * charge_time)
    time_left = np.clip(b - np.maximum(a, t_end), 0.0, None)          # time remaining after t
    slow = np.clip(e - p * time_left, 0.0, None)

    e_hi = fast.sum(axis=1)
    e_lo = slow.sum(axis=1)

    t_start = np.arange(n_hours, dtype=float)[:, None]
    connected = (a < t_start + 1.0) & (b > t_start)
    p_max = (connected * p).sum(axis=1)

    return FleetEnvelope(e_lo, e_hi, p_max, delta_t)


def charging_response(
    envelope: FleetEnvelope,
    power_cap: float | Sequence[float] | np.ndarray,
    redispatch_cap: Sequence[float] | np.ndarray | None = None,
) -> LoadTrace:
    """Closed-form fleet response to hourly power caps.

    Each hour the fleet charges at the minimum of: the rate that catches up
    with the fast-as-possible envelope, the connected charger power, the
    capacity cap, and (when given) the post-redispatch ceiling
    ``prognosis − ΔE^RC/Δt``. Negative redispatch-cap entries are clamped to
    0 (full curtailment) and flagged via ``clamped_hours``.
    """
    H = envelope.n_hours
    dt = envelope.delta_t
    cap = np.broadcast_to(np.asarray(power_cap, dtype=float), (H,)).copy()
    if np.any(cap < 0):
        raise ValueError("power_cap entries must be >= 0")

    clamped: list[int] = []
    if redispatch_cap is not None:
        rc = np.broadcast_to(np.asarray(redispatch_cap, dtype=float), (H,)).copy()
        neg = rc < 0
        if np.any(neg):
            clamped = [int(d) for d in np.nonzero(neg)[0]]
            logger.warning(
                "charging_response: negative redispatch cap clamped to 0 at hours %s", clamped
            )
            rc[neg] = 0.0
        cap = np.minimum(cap, rc)

    power = np.zeros(H)
    energy = np.zeros(H)
    prev = 0.0
    for d in range(H):
        rate = min((envelope.e_hi[d] - prev) / dt, envelope.p_max[d], cap[d])
        rate = max(rate, 0.0)
        power[d] = rate
        prev += rate * dt
        energy[d] = prev

    unserved = float(envelope.e_hi[-1] - energy[-1]) if H else 0.0
    return LoadTrace(power, energy, unserved, tuple(clamped))


def _pava_nondecreasing(y: np.ndarray) -> np.ndarray:
    """L2 projection onto nondecreasing sequences (pool adjacent violators)."""
    vals: list[float] = []
    wts: list[int] = []
    for v in np.asarray(y, dtype=float):
        vals.append(float(v))
        wts.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            w = wts[-2] + wts[-1]
            vals[-2] = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / w
            wts[-2] = w
            vals.pop()
            wts.pop()
    return np.repeat(vals, wts)


def _monotone_repair(x: np.ndarray, freeze_prefix: int) -> np.ndarray:
    """Nondecreasing repair keeping the first ``freeze_prefix`` values exact."""
    x = np.asarray(x, dtype=float)
    if freeze_prefix <= 0:
        return np.clip(_pava_nondecreasing(x), 0.0, None)
    k = min(freeze_prefix, len(x))
    out = x.copy()
    if k < len(x):
        tail = np.clip(_pava_nondecreasing(x[k:]), 0.0, None)
        out[k:] = np.maximum(tail, out[k - 1])
    return out


def repair_envelope(
    e_lo: np.ndarray,
    e_hi: np.ndarray,
    p_max: np.ndarray,
    delta_t: float = 1.0,
    freeze_prefix: int = 0,
) -> FleetEnvelope:
    """Project noisy series back onto the envelope invariants.

    Cumulative series are made nondecreasing by isotonic (L2) projection —
    less upward-biased on flat stretches than a running maximum — then
    clipped at 0, e_lo is clamped below e_hi, and p_max is raised to at
    least the implied envelope steps. The first ``freeze_prefix`` hours are
    treated as already-realized and left untouched (they must come from a
    valid envelope).
    """
    hi = _monotone_repair(np.asarray(e_hi, dtype=float), freeze_prefix)
    lo = _monotone_repair(np.asarray(e_lo, dtype=float), freeze_prefix)
    if freeze_prefix > 0:
        k = min(freeze_prefix, len(lo))
        lo[k:] = np.minimum(lo[k:], hi[k:])
    else:
        lo = np.minimum(lo, hi)
    pm = np.clip(np.asarray(p_max, dtype=float), 0.0, None)
    steps = np.maximum(np.diff(hi, prepend=0.0), np.diff(lo, prepend=0.0)) / delta_t
    k = max(0, min(freeze_prefix, len(pm)))
    pm[k:] = np.maximum(pm[k:], steps[k:])
    return FleetEnvelope(lo, hi, pm, delta_t)


def min_feasible_cap(envelope: FleetEnvelope, tol: float = 1e-6) -> float:
    """Smallest uniform power cap under which the fleet can still complete.

    Used for infeasibility diagnostics: if this exceeds the capacity limit L
    in some scenario, no contract mix can avoid either congestion or
    curtailment in that scenario.
    """
    lo, hi = 0.0, max(float(np.max(envelope.p_max, initial=0.0)), tol)

    def complete(cap: float) -> bool:
        trace = charging_response(envelope, cap)
        return bool(np.all(trace.energy >= envelope.e_lo - tol))

    if complete(lo):
        return 0.0
    if not complete(hi):
        return math.inf
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if complete(mid):
            hi = mid
        else:
            lo = mid
    return hi
