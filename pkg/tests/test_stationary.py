import warnings

import numpy as np
import pytest

from chns.diagnostics import free_energy, reduced_energy
from chns.grid import ScalarField, make_grid
from chns.operators import operators_for
from chns.potentials import PhysParams, PotentialKind, PotentialSpec
from chns.stationary import (cho_flow, minimize_energy, reduced_equilibrium, smoothed_random_start,
                             stationary_residual)

PARAMS = PhysParams(theta=1.0, theta0=3.0, chi=0.5, beta=0.05)
POT = PotentialSpec(PotentialKind.FLORY_HUGGINS, theta=1.0, theta0=3.0)
GRID = make_grid((16, 16), (3.0, 3.0))


def _guess(grid, m1=0.2, amp=0.5):
    x, y = grid.cell_centers()
    return ScalarField(grid, m1 + amp * np.cos(np.pi * x / grid.lengths[0]) + 0 * y)


@pytest.fixture(scope="module")
def flow():
    return cho_flow(_guess(GRID), ScalarField.constant(GRID, 0.5), PARAMS, POT, tol=1e-10)


def test_uniform_state_is_stationary():
    phi = ScalarField.constant(GRID, 0.3)
    sigma = ScalarField.constant(GRID, PARAMS.chi * 0.3 + 0.1)
    r = stationary_residual(phi, sigma, PARAMS, POT)
    assert r.r1 < 1e-13 and r.r2 < 1e-13


def test_cho_flow_converges_to_interface(flow):
    assert flow.converged and flow.energy_monotone
    assert flow.residual < 1e-10
    assert 0 < flow.separation < 1
    # a non-uniform profile with the prescribed means
    assert np.ptp(flow.phi_inf.values) > 0.5
    assert flow.phi_inf.values.mean() == pytest.approx(0.2, abs=1e-12)
    assert flow.sigma_inf.values.mean() == pytest.approx(0.5, abs=1e-12)
    # sigma - chi phi is constant at equilibrium
    w = flow.sigma_inf.values - PARAMS.chi * flow.phi_inf.values
    assert np.ptp(w) < 1e-8


def test_cho_flow_lowers_energy(flow):
    F0 = free_energy(_guess(GRID), ScalarField.constant(GRID, 0.5), PARAMS, POT)
    assert flow.energy < F0


def test_cho_flow_input_validation():
    with pytest.raises(ValueError):
        cho_flow(ScalarField.constant(GRID, 1.0), ScalarField.constant(GRID, 0.0), PARAMS, POT)
    x, y = GRID.cell_centers()
    bad = ScalarField(GRID, 0.5 + 0.6 * np.cos(np.pi * x / 3.0) + 0 * y)
    with pytest.raises(ValueError):
        cho_flow(bad, ScalarField.constant(GRID, 0.0), PARAMS, POT)


def test_reduced_equilibrium_agrees_with_flow(flow):
    res = reduced_equilibrium(_guess(GRID), 0.2, 0.5, PARAMS, POT, tol=1e-10)
    assert res.converged
    ops = operators_for(GRID)
    assert ops.norm(res.phi_inf.values - flow.phi_inf.values) < 1e-7
    assert res.energy == pytest.approx(flow.energy, abs=1e-9)
    # F = reduced energy + |Omega| (m2 - chi m1)^2 / 2 when sigma - chi phi is constant
    assert res.energy == pytest.approx(reduced_energy(res.phi_inf, PARAMS, POT)
                                       + 0.5 * GRID.volume * (0.5 - PARAMS.chi * 0.2) ** 2, abs=1e-9)


def test_reduced_equilibrium_validation():
    with pytest.raises(ValueError):
        reduced_equilibrium(_guess(GRID), 1.0, 0.0, PARAMS, POT)


def test_smoothed_random_start():
    rng = np.random.default_rng(0)
    x = smoothed_random_start(GRID, 0.1, 0.2, rng)
    assert x.mean() == pytest.approx(0.1, abs=1e-14)
    assert np.max(np.abs(x - 0.1)) < 0.2 * 2
    raw = np.random.default_rng(0).uniform(-0.2, 0.2, GRID.shape)
    ops = operators_for(GRID)
    # smoothing lowers the gradient energy relative to the raw noise
    assert ops.face_norm(ops.gradient(x)) < ops.face_norm(ops.gradient(raw))


def test_minimize_energy_prefers_lower_energy():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = minimize_energy(GRID, 0.2, 0.5, PARAMS, POT, n_starts=3, seed=1, tol=1e-9)
    assert len(res.candidates) == 3 and res.best.converged
    assert all(res.best.energy <= c.energy + 1e-12 for c in res.candidates)
    assert res.margin >= -1e-12
    with pytest.raises(ValueError):
        minimize_energy(GRID, 0.2, 0.5, PARAMS, POT, n_starts=0)
