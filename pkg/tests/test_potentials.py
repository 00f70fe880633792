import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import fsolve

from chns import oracles
from chns.grid import ScalarField, make_grid
from chns.operators import Operators
from chns.potentials import (PhysParams, PotentialKind, PotentialSpec, RegularizationError, cutoff_hk,
                             default_stabilization, psi, psi0_double_prime, psi0_prime, psi_double_prime,
                             psi_prime, regularize_initial_phi, regularize_initial_sigma, viscosity)

FH = PotentialSpec(PotentialKind.FLORY_HUGGINS, theta=1.0, theta0=2.0)
QU = PotentialSpec(PotentialKind.QUARTIC)


def test_flory_huggins_values():
    assert psi_prime(FH, 0.0) == 0.0
    assert psi(FH, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert psi_double_prime(FH, 0.0) == pytest.approx(-1.0, abs=1e-15)


def test_quartic_values():
    assert psi(QU, 1.0) == 0.0
    assert psi(QU, 0.0) == 0.25
    assert psi_prime(QU, 0.5) == pytest.approx(0.125 - 0.5)


def test_derivatives_by_differences():
    r = np.linspace(-0.9, 0.9, 19)
    h = 1e-6
    for spec in (FH, QU):
        fd = (psi(spec, r + h) - psi(spec, r - h)) / (2 * h)
        assert np.allclose(fd, psi_prime(spec, r), atol=1e-7)
        fd2 = (psi_prime(spec, r + h) - psi_prime(spec, r - h)) / (2 * h)
        assert np.allclose(fd2, psi_double_prime(spec, r), atol=1e-6)


def test_nan_rejected():
    with pytest.raises(ValueError):
        psi(FH, np.array([0.0, np.nan]))


def test_out_of_range_clamped_with_warning():
    with pytest.warns(RuntimeWarning, match="clamped"):
        vals = psi_prime(FH, np.array([1.0, -1.5, 0.2]))
    assert np.all(np.isfinite(vals))


def test_parameter_validation():
    with pytest.raises(ValueError, match="requires theta < theta0"):
        PhysParams(theta=2.0, theta0=1.0)
    with pytest.raises(ValueError, match="c0 must lie in"):
        PhysParams(c0=1.5)
    with pytest.raises(ValueError):
        PhysParams(nu1=0.0)
    with pytest.raises(ValueError):
        PotentialSpec(clip_delta=0.0)


@settings(max_examples=50, deadline=None)
@given(r=st.floats(-0.999999, 0.999999), theta=st.floats(0.1, 2.0), gap=st.floats(0.01, 3.0))
def test_convex_part(r, theta, gap):
    spec = PotentialSpec(PotentialKind.FLORY_HUGGINS, theta=theta, theta0=theta + gap)
    assert psi0_double_prime(spec, r) >= theta * (1 - 1e-12)
    assert psi0_prime(spec, r) == pytest.approx(theta * np.arctanh(r), rel=1e-9, abs=1e-12)


def test_viscosity():
    assert np.all(viscosity(PhysParams(nu1=1, nu2=1), np.linspace(-3, 3, 13)) == 1.0)
    p = PhysParams(nu1=2.0, nu2=1.0)
    assert viscosity(p, 0.0) == pytest.approx(1.5)
    assert viscosity(p, 3.0) == pytest.approx(2.0)
    assert viscosity(p, -3.0) == pytest.approx(1.0)
    r = np.linspace(-0.94, 0.94, 11)
    assert np.allclose(viscosity(p, r), 1.5 + 0.5 * r)


def test_viscosity_clamp_is_c2():
    p = PhysParams(nu1=2.0, nu2=1.0)
    r = np.linspace(0.9, 1.1, 4001)
    nu = viscosity(p, r)
    d1 = np.gradient(nu, r)
    d2 = np.gradient(d1, r)
    assert np.max(np.abs(np.diff(d1))) < 1e-3
    assert np.max(np.abs(np.diff(d2))) < 0.5


def test_cutoff():
    assert cutoff_hk(3, 5.0) == 3
    assert cutoff_hk(3, -5.0) == -3
    assert cutoff_hk(3, 2.0) == 2


@settings(max_examples=100, deadline=None)
@given(k=st.floats(0.01, 100), a=st.floats(-1e3, 1e3), b=st.floats(-1e3, 1e3))
def test_cutoff_lipschitz_odd(k, a, b):
    assert abs(cutoff_hk(k, a) - cutoff_hk(k, b)) <= abs(a - b)
    assert cutoff_hk(k, -a) == -cutoff_hk(k, a)


def test_default_stabilization():
    assert default_stabilization(QU) == 1.0
    s = default_stabilization(FH)
    assert s > 0.5 * FH.theta0


@pytest.fixture(scope="module")
def ops8():
    return Operators(make_grid((8, 8), (1.0, 1.0)))


def test_regularize_constant_fixed_point(ops8):
    g = ops8.grid
    out = regularize_initial_phi(ScalarField.constant(g, 0.3), 10.0, ops8, FH)
    assert np.allclose(out.values, 0.3, atol=1e-12)


def test_regularize_bounds_chemical_potential():
    g = make_grid((32, 32), (1.0, 1.0))
    ops = Operators(g)
    x, y = g.cell_centers()
    phi0 = 0.999 * np.tanh(20 * (x - 0.5)) + 0 * y
    k = 2.0
    out = regularize_initial_phi(ScalarField(g, phi0), k, ops, FH)
    mu = -ops.laplacian(out.values) + psi0_prime(FH, out.values)
    assert np.max(np.abs(mu)) <= k + 1e-8
    assert 1 - np.max(np.abs(out.values)) > 0


def test_regularize_against_dense_newton(ops8):
    g = ops8.grid
    x, y = g.cell_centers()
    phi0 = 0.95 * np.cos(np.pi * x) * np.cos(np.pi * y)
    k = 1.5
    out = regularize_initial_phi(ScalarField(g, phi0), k, ops8, FH)
    L = oracles.dense_laplacian(g)
    rhs = np.clip(-L @ phi0.ravel() + np.arctanh(phi0.ravel()), -k, k)
    ref = fsolve(lambda p: -L @ p + np.arctanh(np.clip(p, -1 + 1e-15, 1 - 1e-15)) - rhs,
                 np.tanh(rhs), xtol=1e-12)
    assert np.max(np.abs(out.values.ravel() - ref)) < 1e-8
    assert out.values.mean() == pytest.approx(ref.mean(), abs=1e-8)


def test_regularize_failure_reports_residual(ops8):
    g = ops8.grid
    x, y = g.cell_centers()
    phi0 = 0.9 * np.cos(np.pi * x) + 0 * y
    with pytest.raises(RegularizationError) as exc:
        regularize_initial_phi(ScalarField(g, phi0), 5.0, ops8, FH, max_iter=1)
    assert exc.value.residual > 0


def test_regularize_sigma(ops8):
    g = ops8.grid
    assert np.allclose(regularize_initial_sigma(ScalarField.constant(g, 2.0), 3.0, ops8).values, 2.0)
    s0 = np.random.default_rng(0).standard_normal(g.shape)
    out = regularize_initial_sigma(ScalarField(g, s0), 3.0, ops8)
    assert abs(out.values.mean() - s0.mean()) < 1e-12
    L = oracles.dense_laplacian(g)
    ref = np.linalg.solve(np.eye(64) - L / 3.0, s0.ravel())
    assert np.allclose(out.values.ravel(), ref, atol=1e-12)


def test_regularize_sigma_large_k():
    g = make_grid((32, 32), (1.0, 1.0))
    ops = Operators(g)
    x, y = g.cell_centers()
    s0 = np.cos(np.pi * x) * np.sin(np.pi * y)
    out = regularize_initial_sigma(ScalarField(g, s0), 1e8, ops)
    assert ops.norm(out.values - s0) < 1e-4


def test_no_warning_inside_range():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        psi(FH, np.linspace(-0.99, 0.99, 5))
