"""Shared fixtures: benchmark grids, ensembles, and analytic reference data."""

import numpy as np
import pytest

from koopeig import (
    EigenvalueSet,
    SimGrid,
    TrajectoryEnsemble,
    get_system,
    simulate_ensemble,
)

MU, NU = -0.1, -1.0


def analytic_closure_states(ics, t, mu=MU, nu=NU):
    """Exact flow of the finite-closure system for every initial condition.

    With c = nu / (2 mu - nu) the combination x2 + c x1^2 decays at rate nu,
    so x2(t) = (x2_0 + c x1_0^2) e^{nu t} - c x1_0^2 e^{2 mu t}.
    """
    ics = np.atleast_2d(ics)
    c = nu / (2 * mu - nu)
    x1 = ics[:, 0][:, None] * np.exp(mu * t)[None, :]
    fast = (ics[:, 1] + c * ics[:, 0] ** 2)[:, None] * np.exp(nu * t)[None, :]
    slow = (-c * ics[:, 0] ** 2)[:, None] * np.exp(2 * mu * t)[None, :]
    return np.stack([x1, fast + slow], axis=1)


def analytic_closure_ensemble(grid: SimGrid, dt: float, n: int, reference_ic) -> TrajectoryEnsemble:
    """Ensemble whose trajectories follow the exact closure flow (no integrator error)."""
    t = np.arange(n) * dt
    ics = grid.points()
    states = analytic_closure_states(ics, t)
    return TrajectoryEnsemble(
        dt=dt, states=states, initial_conditions=states[:, :, 0].copy(),
        reference_index=grid.index_of(reference_ic),
    )


@pytest.fixture(scope="session")
def closure_grid():
    return SimGrid(ranges=((-1.0, 1.0), (-1.0, 1.0)), counts=(21, 21), subgrid_stride=4)


@pytest.fixture(scope="session")
def closure_system():
    return get_system("closure")


@pytest.fixture(scope="session")
def closure_ensemble(closure_system, closure_grid):
    return simulate_ensemble(closure_system, closure_grid, 0.2, 250, (-1.0, -1.0))


@pytest.fixture(scope="session")
def closure_exact_ensemble(closure_grid):
    return analytic_closure_ensemble(closure_grid, 0.2, 250, (-1.0, -1.0))


@pytest.fixture(scope="session")
def exact_closure_eigs():
    return EigenvalueSet.from_pairs(
        [[MU, 0.0], [2 * MU, 0.0], [NU, 0.0]], fixed=[True, True, True]
    )
