from __future__ import annotations

import numpy as np
import pytest

from clcrc.fleet import ChargingSession, FleetEnvelope, aggregate_sessions


def random_sessions(rng: np.random.Generator, n_ev: int, n_hours: int = 24) -> list[ChargingSession]:
    """Random feasible charging sessions inside the horizon."""
    out = []
    for i in range(n_ev):
        a = rng.uniform(0.0, n_hours - 0.5)
        b = rng.uniform(a + 0.25, n_hours)
        p = rng.choice([0.0037, 0.0074, 0.011])
        e = rng.uniform(0.0, 1.0) * p * (b - a)
        out.append(ChargingSession(f"ev{i}", a, b, e, p))
    return out


def random_fleet(seed: int, n_ev: int = 30, n_hours: int = 24) -> FleetEnvelope:
    rng = np.random.default_rng(seed)
    return aggregate_sessions(random_sessions(rng, n_ev, n_hours), n_hours)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
