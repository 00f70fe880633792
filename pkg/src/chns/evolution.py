"""Semi-implicit time stepping for the coupled flow / phase / nutrient system.

One step runs phase -> nutrient -> velocity, so the capillary force sees the
updated phase, chemical potential and nutrient.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .grid import Grid, ScalarField, VectorField
from .operators import LinearSolveConfig, Operators, operators_for
from .potentials import (PhysParams, PotentialSpec, count_clips, default_stabilization,
                         psi_prime, viscosity)


class SeparationError(RuntimeError):
    """Raised when a Flory-Huggins step leaves the strictly separated range."""

    def __init__(self, separation: float):
        super().__init__(f"phase field left the separated range: min separation {separation:.3e}")
        self.separation = separation


@dataclass
class SimState:
    v: VectorField
    p: ScalarField
    phi: ScalarField
    mu: ScalarField
    sigma: ScalarField
    t: float = 0.0
    step: int = 0
    phi_mean0: float = math.nan
    sigma_mean0: float = math.nan
    # mean of phi predicted by the exact discrete recurrence
    phi_mean_discrete: float = math.nan
    clip_events: int = 0

    def __post_init__(self):
        if self.t < 0 or self.step < 0:
            raise ValueError("time and step counter must be nonnegative")
        if math.isnan(self.phi_mean0):
            self.phi_mean0 = float(self.phi.values.mean())
        if math.isnan(self.sigma_mean0):
            self.sigma_mean0 = float(self.sigma.values.mean())
        if math.isnan(self.phi_mean_discrete):
            self.phi_mean_discrete = float(self.phi.values.mean())

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    def copy(self) -> "SimState":
        return dataclasses.replace(self, v=self.v.copy(), p=self.p.copy(), phi=self.phi.copy(),
                                   mu=self.mu.copy(), sigma=self.sigma.copy())


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    params: PhysParams = field(default_factory=PhysParams)
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    stabilization: Optional[float] = None
    linear: LinearSolveConfig = field(default_factory=LinearSolveConfig)
    clip_floor: float = 1e-6

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.stabilization is not None and self.stabilization < 0:
            raise ValueError("stabilization S must be nonnegative")
        if self.potential.theta != self.params.theta or self.potential.theta0 != self.params.theta0:
            raise ValueError("potential and params disagree on theta/theta0")

    @property
    def S(self) -> float:
        if self.stabilization is not None:
            return float(self.stabilization)
        return default_stabilization(self.potential)

    @property
    def gamma(self) -> float:
        return self.params.gamma

    def ops(self, grid: Grid) -> Operators:
        return operators_for(grid, self.linear)


def chemical_potential(phi: ScalarField, sigma: ScalarField, params: PhysParams,
                       potential: PotentialSpec, ops: Operators | None = None) -> ScalarField:
    """``mu = -Lap phi + Psi'(phi) - chi sigma + beta N(phi - mean phi)``."""
    ops = ops or operators_for(phi.grid)
    f = phi.values
    if potential.singular and np.max(np.abs(f)) >= 1.0:
        raise ValueError("Flory-Huggins chemical potential needs |phi| < 1")
    mu = -ops.laplacian(f) + psi_prime(potential, f) - params.chi * sigma.values
    if params.beta:
        mu = mu + params.beta * ops.inv_neumann_laplacian(f - f.mean())
    return ScalarField(phi.grid, mu)


def initial_state(phi: ScalarField, sigma: ScalarField, params: PhysParams,
                  potential: PotentialSpec, v: VectorField | None = None) -> SimState:
    grid = phi.grid
    ops = operators_for(grid)
    v = v or VectorField.zeros(grid)
    if np.max(np.abs(ops.divergence(v.components))) > 1e-8 * max(1.0, _vmax(v)) / min(grid.spacing):
        v = VectorField(grid, ops.leray_project(v.components)[0])
    mu = chemical_potential(phi, sigma, params, potential, ops)
    return SimState(v=v, p=ScalarField.constant(grid, 0.0), phi=phi.copy(), mu=mu, sigma=sigma.copy())


def _vmax(v: VectorField) -> float:
    return max(float(np.max(np.abs(c))) for c in v.components)


def _explicit_part(state: SimState, cfg: StepperConfig, ops: Operators):
    """Explicit terms of mu: ``Psi'(phi^n) - chi sigma^n + beta N(phi^n - mean)``."""
    f = state.phi.values
    g = psi_prime(cfg.potential, f) - cfg.params.chi * state.sigma.values
    if cfg.params.beta:
        g = g + cfg.params.beta * ops.inv_neumann_laplacian(f - f.mean())
    return g


def mean_recurrence(mean: float, dt: float, params: PhysParams) -> float:
    return (mean + dt * params.alpha * params.c0) / (1.0 + dt * params.alpha)


def step_phase(state: SimState, cfg: StepperConfig, dt: float | None = None):
    """Stabilised semi-implicit Cahn-Hilliard-Oono step; returns ``(phi, mu)``."""
    dt = cfg.dt if dt is None else dt
    ops = cfg.ops(state.grid)
    prm = cfg.params
    f = state.phi.values
    g = _explicit_part(state, cfg, ops)
    mu_tilde = -ops.laplacian(f) + g
    a = cfg.gamma / dt + cfg.S
    old_mean = f.mean()
    new_mean = mean_recurrence(old_mean, dt, prm)
    conv = ops.convect(state.v.components, f)
    rhs = -conv + ops.laplacian(mu_tilde)
    rhs -= rhs.mean()
    delta = ops.solve_neumann(rhs, c0=1.0 / dt, c1=a, c2=1.0)
    delta += (new_mean - old_mean) - delta.mean()
    phi = f + delta
    # keep the mean on the recurrence to rounding
    phi += new_mean - phi.mean()
    if cfg.potential.singular:
        sep = 1.0 - float(np.max(np.abs(phi)))
        if sep <= cfg.clip_floor:
            raise SeparationError(sep)
    mu = a * (phi - f) - ops.laplacian(phi) + g
    grid = state.grid
    return ScalarField(grid, phi), ScalarField(grid, mu)


def step_sigma(state: SimState, phi_next: ScalarField, cfg: StepperConfig, dt: float | None = None) -> ScalarField:
    """Implicit diffusion with explicit transport and chemotactic drive."""
    dt = cfg.dt if dt is None else dt
    ops = cfg.ops(state.grid)
    s = state.sigma.values
    rhs = s / dt - ops.convect(state.v.components, s)
    if cfg.params.chi:
        rhs = rhs - cfg.params.chi * ops.laplacian(phi_next.values)
    out = ops.solve_neumann(rhs, c0=1.0 / dt, c1=1.0)
    out += s.mean() - out.mean()
    return ScalarField(state.grid, out)


def capillary_force(phi: np.ndarray, mu: np.ndarray, sigma: np.ndarray, chi: float, ops: Operators):
    """``(mu + chi sigma) grad phi`` on faces, with face-averaged potential."""
    w = ops.face_average(mu + chi * sigma)
    return tuple(a * b for a, b in zip(w, ops.gradient(phi)))


def step_velocity(state: SimState, phi_next: ScalarField, mu_next: ScalarField,
                  sigma_next: ScalarField, cfg: StepperConfig, dt: float | None = None):
    """Projection step; returns ``(v, p)`` with ``p`` of zero mean."""
    dt = cfg.dt if dt is None else dt
    grid = state.grid
    ops = cfg.ops(grid)
    u = state.v.components
    vmax = _vmax(state.v)
    cfl = vmax * dt / min(grid.spacing)
    if cfl > 0.8:
        warnings.warn(f"CFL number {cfl:.3f} exceeds 0.8", RuntimeWarning)
    force = capillary_force(phi_next.values, mu_next.values, sigma_next.values, cfg.params.chi, ops)
    if vmax > 0:
        adv = ops.advect_momentum(u)
        force = tuple(f - b for f, b in zip(force, adv))
    # project the explicit forcing first: its gradient part goes straight
    # into the pressure instead of being smeared by the no-slip viscous solve
    force, q0 = ops.leray_project(force)
    rhs = tuple(a + dt * f for a, f in zip(u, force))
    nu = viscosity(cfg.params, phi_next.values)
    ustar = ops.momentum_viscous_solve(rhs, nu, dt, x0=u)
    v, q = ops.leray_project(ustar)
    p = q0 + q / dt
    p -= p.mean()
    return VectorField(grid, v), ScalarField(grid, p)


def _advance(state: SimState, cfg: StepperConfig, dt: float) -> SimState:
    clips = count_clips(cfg.potential, state.phi.values)
    phi, mu = step_phase(state, cfg, dt)
    sigma = step_sigma(state, phi, cfg, dt)
    v, p = step_velocity(state, phi, mu, sigma, cfg, dt)
    return SimState(v=v, p=p, phi=phi, mu=mu, sigma=sigma, t=state.t + dt, step=state.step,
                    phi_mean0=state.phi_mean0, sigma_mean0=state.sigma_mean0,
                    phi_mean_discrete=mean_recurrence(state.phi_mean_discrete, dt, cfg.params),
                    clip_events=state.clip_events + clips)


def step(state: SimState, cfg: StepperConfig) -> SimState:
    """One full step; a separation failure is retried once as two half steps."""
    try:
        new = _advance(state, cfg, cfg.dt)
    except SeparationError:
        half = 0.5 * cfg.dt
        new = _advance(_advance(state, cfg, half), cfg, half)
    new.step = state.step + 1
    return new


Callback = Callable[[SimState], None]


def run(state: SimState, cfg: StepperConfig, t_end: float | None = None, n_steps: int | None = None,
        callbacks: Iterable[Callback] = (), stop: Callable[[SimState], bool] | None = None) -> SimState:
    """Advance ``state`` by ``n_steps`` steps or up to ``t_end``.

    Callbacks are called with the new state after every step (diagnostics
    recorders, checkpoint writers).  ``stop`` ends the run early when it
    returns True.  The input state is never modified.
    """
    if (t_end is None) == (n_steps is None):
        raise ValueError("give exactly one of t_end and n_steps")
    if n_steps is None:
        n_steps = max(0, int(round((t_end - state.t) / cfg.dt)))
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    callbacks = list(callbacks)
    cur = state
    for _ in range(n_steps):
        cur = step(cur, cfg)
        for cb in callbacks:
            cb(cur)
        if stop is not None and stop(cur):
            break
    return cur if cur is not state else state.copy()
