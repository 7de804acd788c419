"""Shared fixtures for the colflux test suite.

Session-scoped fixtures hold the nominal parameter set and the solved
steady state so the expensive fixed-point solve runs once per session.
"""

from __future__ import annotations

import numpy as np
import pytest

from colflux.column import (
    ColumnParams,
    ColumnState,
    Controls,
    FeedConditions,
    NoiseSpec,
    steady_state,
)


@pytest.fixture(scope="session")
def params() -> ColumnParams:
    return ColumnParams()


@pytest.fixture(scope="session")
def nominal_feed(params) -> FeedConditions:
    return FeedConditions.nominal(params)


@pytest.fixture(scope="session")
def nominal_controls(params) -> Controls:
    return Controls.nominal(params)


@pytest.fixture(scope="session")
def noise_spec(params) -> NoiseSpec:
    return NoiseSpec.table_default(params)


@pytest.fixture(scope="session")
def ss_state(params) -> ColumnState:
    return steady_state(params)


@pytest.fixture(scope="session")
def region_run(params):
    """Benchmark closed-loop log over a small disturbance sequence.

    One receding-horizon rollout (roughly fifteen seconds of wall time)
    shared by the sampling and scenario tests. Returns the disturbance
    sequence, the logged operating-region data, and the full trajectory.
    """
    from colflux.scenarios import (
        estimate_operating_region,
        generate_disturbance_sequence,
    )

    seq = generate_disturbance_sequence(seed=0, n_events=5)
    region, traj = estimate_operating_region(seq, params)
    return seq, region, traj


def random_valid_states(params: ColumnParams, n: int, seed: int) -> list[ColumnState]:
    """States with holdups near nominal and compositions strictly inside (0, 1)."""
    rng = np.random.default_rng(seed)
    states = []
    for _ in range(n):
        m = params.M0 * rng.uniform(0.5, 1.5, params.N_T)
        x = rng.uniform(0.01, 0.99, params.N_T)
        states.append(ColumnState(M=m, x=x))
    return states
