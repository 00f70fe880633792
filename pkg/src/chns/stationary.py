"""Equilibria: viscous gradient flow, reduced single-field solve, multi-start minimisation."""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, minres

from .diagnostics import free_energy, reduced_energy
from .evolution import SimState, StepperConfig, SeparationError, step_phase, step_sigma
from .grid import Grid, ScalarField, VectorField
from .operators import LinearSolveConfig, Operators, operators_for
from .potentials import PhysParams, PotentialSpec, psi_double_prime, psi_prime


@dataclass
class EquilibriumResult:
    phi_inf: ScalarField
    sigma_inf: ScalarField
    energy: float
    residual: float
    separation: float
    iterations: int
    converged: bool
    r1: float = math.nan
    r2: float = math.nan
    energy_monotone: bool = True


class Residual(NamedTuple):
    r1: float
    r2: float


def stationary_residual(phi: ScalarField, sigma: ScalarField, params: PhysParams,
                        potential: PotentialSpec, ops: Operators | None = None) -> Residual:
    """``r1``: L2 norm of the zero-mean part of the first stationary equation; ``r2 = ||grad(sigma - chi phi)||``."""
    ops = ops or operators_for(phi.grid)
    f = phi.values
    lhs = -ops.laplacian(f) + psi_prime(potential, f) - params.chi * sigma.values
    if params.beta:
        lhs = lhs + params.beta * ops.inv_neumann_laplacian(f - f.mean())
    lhs = lhs - lhs.mean()
    w = sigma.values - params.chi * f
    return Residual(ops.norm(lhs), ops.face_norm(ops.gradient(w)))


def _result(phi, sigma, params, potential, ops, iterations, tol, monotone=True) -> EquilibriumResult:
    r = stationary_residual(phi, sigma, params, potential, ops)
    res = max(r.r1, r.r2)
    return EquilibriumResult(phi_inf=phi, sigma_inf=sigma,
                             energy=free_energy(phi, sigma, params, potential, ops),
                             residual=res, separation=1.0 - float(np.max(np.abs(phi.values))),
                             iterations=iterations, converged=bool(res < tol), r1=r.r1, r2=r.r2,
                             energy_monotone=monotone)


def cho_flow(phi0: ScalarField, sigma0: ScalarField, params: PhysParams, potential: PotentialSpec,
             gamma: float = 0.1, dt: float = 0.01, tol: float = 1e-8, max_steps: int = 20000,
             dt_max: float = 0.1, stabilization: float | None = None,
             linear: LinearSolveConfig | None = None, stall_window: int = 200) -> EquilibriumResult:
    """Viscous Cahn-Hilliard-Oono flow with the fluid switched off.

    Uses the stabilised stepper with ``v = 0`` and ``alpha = 0``.  The step
    grows by 10% after every accepted step up to ``dt_max``; a step that
    would raise the free energy is rejected and retried with half the step,
    so the accepted energies are non-increasing.  Stops when both the
    dissipation norms and the stationary residuals drop below ``tol``.

    Very large pseudo-time steps let the iterate overshoot past the range
    the stabilisation covers and lock into a two-cycle of equal energy, so
    ``dt_max`` is kept moderate, and it is halved whenever the residual has
    not improved for ``stall_window`` accepted steps.
    """
    f0 = phi0.values
    if abs(f0.mean()) >= 1.0:
        raise ValueError("mean of phi0 must lie in (-1, 1)")
    if potential.singular and np.max(np.abs(f0)) >= 1.0:
        raise ValueError("phi0 must satisfy |phi0| < 1 for Flory-Huggins")
    grid = phi0.grid
    prm = dataclasses.replace(params, alpha=0.0, gamma=gamma)
    linear = linear or LinearSolveConfig()
    ops = operators_for(grid, linear)
    zero_v = VectorField.zeros(grid)
    zero_p = ScalarField.constant(grid, 0.0)
    state = SimState(v=zero_v, p=zero_p, phi=phi0.copy(), mu=zero_p, sigma=sigma0.copy())
    F = free_energy(state.phi, state.sigma, prm, potential, ops)
    h = dt
    monotone = True
    steps = 0
    best, since_best = math.inf, 0
    while steps < max_steps:
        r = stationary_residual(state.phi, state.sigma, prm, potential, ops)
        res = max(r.r1, r.r2)
        if res < 0.99 * best:
            best, since_best = res, 0
        elif since_best >= stall_window:
            dt_max *= 0.5
            h = min(h, dt_max)
            best, since_best = res, 0
        if res < tol:
            mu = _pure_mu(state, prm, potential, ops)
            w = state.sigma.values - prm.chi * state.phi.values
            if ops.face_norm(ops.gradient(mu)) + ops.face_norm(ops.gradient(w)) < tol:
                break
        cfg = StepperConfig(dt=h, params=prm, potential=potential, stabilization=stabilization, linear=linear)
        try:
            phi, _ = step_phase(state, cfg)
            sigma = step_sigma(state, phi, cfg)
            F_new = free_energy(phi, sigma, prm, potential, ops)
        except SeparationError:
            F_new = math.inf
        if F_new > F + 1e-13 * max(1.0, abs(F)):
            if h < 1e-12:
                monotone = False
                break
            h *= 0.5
            continue
        state = SimState(v=zero_v, p=zero_p, phi=phi, mu=zero_p, sigma=sigma)
        F = F_new
        steps += 1
        since_best += 1
        h = min(1.1 * h, dt_max)
    return _result(state.phi, state.sigma, prm, potential, ops, steps, tol, monotone)


def _pure_mu(state, params, potential, ops):
    f = state.phi.values
    mu = -ops.laplacian(f) + psi_prime(potential, f) - params.chi * state.sigma.values
    if params.beta:
        mu = mu + params.beta * ops.inv_neumann_laplacian(f - f.mean())
    return mu


def _reduced_gradient(f, params, potential, ops):
    g = -ops.laplacian(f) + psi_prime(potential, f) - params.chi ** 2 * f
    if params.beta:
        g = g + params.beta * ops.inv_neumann_laplacian(f - f.mean())
    return g - g.mean()


def _admissible(potential, f):
    return not potential.singular or np.max(np.abs(f)) < 1.0 - potential.clip_delta


def reduced_equilibrium(phi_guess: ScalarField, m1: float, m2: float, params: PhysParams,
                        potential: PotentialSpec, tol: float = 1e-8, max_iter: int = 5000,
                        newton_switch: float = 1e-3) -> EquilibriumResult:
    """Stationary point of the reduced energy at mean ``m1``; ``sigma = chi phi + (m2 - chi m1)``.

    Sobolev-preconditioned gradient descent with Armijo backtracking on the
    reduced energy, followed by Newton-MINRES steps once the gradient is small.
    """
    if not -1.0 < m1 < 1.0:
        raise ValueError("m1 must lie in (-1, 1)")
    grid = phi_guess.grid
    ops = operators_for(grid)
    f = phi_guess.values - phi_guess.values.mean() + m1
    if not _admissible(potential, f):
        raise ValueError("shifted guess leaves (-1, 1)")
    chi2 = params.chi ** 2
    shift = 1.0 + chi2
    E = lambda x: reduced_energy(ScalarField(grid, x), params, potential, ops)

    def hess(x):
        d2 = psi_double_prime(potential, x) - chi2

        def mv(y):
            y = y.reshape(grid.shape)
            out = -ops.laplacian(y) + d2 * y
            if params.beta:
                out = out + params.beta * ops.inv_neumann_laplacian(y - y.mean())
            return (out - out.mean()).ravel()
        return mv

    def precond(y):
        y = y.reshape(grid.shape)
        out = ops.solve_neumann(y - y.mean(), c0=shift, c1=1.0)
        return (out - out.mean()).ravel()

    N = grid.size
    P = LinearOperator((N, N), matvec=precond, dtype=float)
    Fv = E(f)
    it = 0
    for it in range(1, max_iter + 1):
        g = _reduced_gradient(f, params, potential, ops)
        gn = ops.norm(g)
        if gn < 0.1 * tol:
            break
        done = False
        if gn < newton_switch:
            H = LinearOperator((N, N), matvec=hess(f), dtype=float)
            d, _ = minres(H, -g.ravel(), M=P, rtol=min(1e-3, gn), maxiter=500)
            d = d.reshape(grid.shape)
            d -= d.mean()
            lam = 1.0
            while lam > 1e-4:
                trial = f + lam * d
                if _admissible(potential, trial):
                    gt = ops.norm(_reduced_gradient(trial, params, potential, ops))
                    if gt < (1.0 - 1e-4 * lam) * gn:
                        f, Fv, done = trial, E(trial), True
                        break
                lam *= 0.5
        if done:
            continue
        d = -precond(g.ravel()).reshape(grid.shape)
        slope = ops.inner(g, d)
        lam = 1.0
        while True:
            trial = f + lam * d
            if _admissible(potential, trial):
                Ft = E(trial)
                if Ft <= Fv + 1e-4 * lam * slope:
                    break
            lam *= 0.5
            if lam < 1e-14:
                break
        if lam < 1e-14:
            break
        f, Fv = trial, Ft
    phi = ScalarField(grid, f + (m1 - f.mean()))
    sigma = ScalarField(grid, params.chi * phi.values + (m2 - params.chi * m1))
    return _result(phi, sigma, params, potential, ops, it, tol)


def smoothed_random_start(grid: Grid, m1: float, amplitude: float, rng: np.random.Generator,
                          passes: int = 2) -> np.ndarray:
    """i.i.d. uniform noise smoothed by ``(I - h^2 Lap)^{-1}``, re-centred on ``m1``."""
    ops = operators_for(grid)
    h2 = min(grid.spacing) ** 2
    x = rng.uniform(-amplitude, amplitude, grid.shape)
    for _ in range(passes):
        x = ops.solve_neumann(x, c0=1.0, c1=h2)
    return x - x.mean() + m1


@dataclass
class MinimizeResult:
    best: EquilibriumResult
    candidates: list = field(default_factory=list)
    uniform_energy: float = math.nan

    @property
    def margin(self) -> float:
        """Energy gap between the uniform state and the best candidate."""
        return self.uniform_energy - self.best.energy


def minimize_energy(grid: Grid, m1: float, m2: float, params: PhysParams, potential: PotentialSpec,
                    n_starts: int = 4, seed: int = 0, amplitude: float = 0.1, **flow_kw) -> MinimizeResult:
    """Run ``cho_flow`` from the uniform state and ``n_starts - 1`` random starts; keep the lowest energy."""
    if not -1.0 < m1 < 1.0:
        raise ValueError("m1 must lie in (-1, 1)")
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    rng = np.random.default_rng(seed)
    sigma0 = ScalarField.constant(grid, m2)
    uniform = ScalarField.constant(grid, m1)
    starts = [uniform] + [ScalarField(grid, smoothed_random_start(grid, m1, amplitude, rng))
                          for _ in range(n_starts - 1)]
    cands = []
    for s in starts:
        r = cho_flow(s, sigma0, params, potential, **flow_kw)
        if r.converged:
            cands.append(r)
        else:
            warnings.warn(f"candidate not converged (residual {r.residual:.3e}); excluded", RuntimeWarning)
    if not cands:
        raise RuntimeError("no candidate converged")
    best = min(cands, key=lambda r: r.energy)
    uf = free_energy(uniform, sigma0, params, potential)
    return MinimizeResult(best=best, candidates=cands, uniform_energy=uf)
