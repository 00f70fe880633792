"""Built-in acceptance suites, runnable from the command line or from tests.

Each suite returns a :class:`SuiteResult` holding named checks with the
measured value, the threshold and the verdict.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import oracles
from .diagnostics import (distance_to_equilibrium, fit_convergence_rate, free_energy, reduced_energy,
                          total_energy)
from .evolution import StepperConfig, initial_state, mean_recurrence, run
from .grid import Grid, ScalarField, VectorField, make_grid
from .operators import LinearSolveConfig, Operators, SolveMethod
from .potentials import PhysParams, PotentialKind, default_stabilization
from .stationary import cho_flow, reduced_equilibrium, stationary_residual


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    relation: str = "<="

    def as_dict(self) -> dict:
        return {"check": self.name, "value": _json_num(self.value), "threshold": _json_num(self.threshold),
                "relation": self.relation, "passed": self.passed}


def _json_num(x):
    x = float(x)
    return x if math.isfinite(x) else str(x)


@dataclass
class SuiteResult:
    suite: str
    checks: list = field(default_factory=list)
    elapsed: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def le(self, name, value, threshold):
        self.checks.append(Check(name, float(value), float(threshold), bool(value <= threshold), "<="))

    def lt(self, name, value, threshold):
        self.checks.append(Check(name, float(value), float(threshold), bool(value < threshold), "<"))

    def ge(self, name, value, threshold):
        self.checks.append(Check(name, float(value), float(threshold), bool(value >= threshold), ">="))

    def gt(self, name, value, threshold):
        self.checks.append(Check(name, float(value), float(threshold), bool(value > threshold), ">"))

    def within(self, name, value, lo, hi):
        self.checks.append(Check(name, float(value), float(hi), bool(lo <= value <= hi), f"in [{lo}, {hi}]"))

    def true(self, name, flag):
        self.checks.append(Check(name, float(bool(flag)), 1.0, bool(flag), "=="))


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-300))


def _timed(limit: float):
    """Record the wall time of a suite and check it against ``limit`` seconds."""
    def deco(fn):
        def wrapper(size=None):
            t0 = time.perf_counter()
            res = fn(size) if size is not None else fn()
            res.elapsed = time.perf_counter() - t0
            res.lt("runtime [s]", res.elapsed, limit)
            return res
        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper
    return deco


# -- 1: operators against dense assemblies -------------------------------------

def _operator_checks(res: SuiteResult, grid: Grid, tag: str, rng) -> None:
    fast = Operators(grid)
    cg = Operators(grid, LinearSolveConfig(SolveMethod.CG, tol=1e-10))
    f = rng.standard_normal(grid.shape)
    f0 = f - f.mean()
    u = VectorField(grid, tuple(rng.standard_normal(grid.face_shape(d)) for d in range(grid.ndim))).components

    L = oracles.dense_laplacian(grid)
    res.le(f"{tag} laplacian", _rel(fast.laplacian(f).ravel(), L @ f.ravel()), 1e-8)

    Ninv = oracles.dense_inv_neumann(grid)
    ref = Ninv @ f0.ravel()
    res.le(f"{tag} N spectral", _rel(fast.inv_neumann_laplacian(f0), ref), 1e-8)
    res.le(f"{tag} N cg", _rel(cg.inv_neumann_laplacian(f0), ref), 1e-8)

    P = oracles.dense_leray(grid)
    ref = P @ oracles.stack_faces(u)
    res.le(f"{tag} leray spectral", _rel(oracles.stack_faces(fast.leray_project(u)[0]), ref), 1e-8)
    res.le(f"{tag} leray cg", _rel(oracles.stack_faces(cg.leray_project(u)[0]), ref), 1e-8)

    nu = 1.0 + 2.0 * rng.random(grid.shape)
    K = oracles.dense_viscous(grid, nu)
    x = fast.pack(u)
    res.le(f"{tag} viscous apply", _rel(fast.pack(fast.viscous_apply(u, nu)), K @ x), 1e-8)
    dt = 0.1
    ref = np.linalg.solve(np.eye(x.size) + dt * K, x)
    res.le(f"{tag} viscous solve cg", _rel(cg.pack(cg.momentum_viscous_solve(u, nu, dt)), ref), 1e-8)

    gf = fast.gradient(f)
    lhs = fast.face_inner(gf, u) + fast.inner(f, fast.divergence(u))
    scale = fast.face_norm(gf) * fast.face_norm(u) + fast.norm(f) * fast.norm(fast.divergence(u))
    res.le(f"{tag} div/grad adjointness", abs(lhs) / scale, 1e-12)


@_timed(30)
def suite_operators(size: int = 16) -> SuiteResult:
    """Operators against loop-assembled dense oracles on a 2D and a 3D grid."""
    res = SuiteResult("operators")
    rng = np.random.default_rng(20240601)
    n3 = max(4, min(size, 8))
    _operator_checks(res, make_grid((size, size), (1.0, 1.3)), f"2D {size}^2", rng)
    _operator_checks(res, make_grid((n3, n3, n3), (1.0, 0.8, 1.2)), f"3D {n3}^3", rng)
    return res


# -- shared Flory-Huggins scenario ---------------------------------------------

def _fh_params(alpha: float) -> PhysParams:
    return PhysParams(nu1=1.0, nu2=2.0, chi=0.5, alpha=alpha, beta=0.1, c0=0.0, theta=1.0, theta0=2.0)


def _fh_initial(grid: Grid, params: PhysParams, noise: bool = True):
    L = grid.lengths[0]
    x, y = grid.cell_centers()
    phi = 0.3 + 0.5 * np.cos(2 * np.pi * x / L) * np.cos(np.pi * y / L) + 0 * y
    if noise:
        phi = phi + np.random.default_rng(1).uniform(-0.05, 0.05, grid.shape)
    sigma = 1.0 + 0.2 * np.sin(np.pi * x / L) + 0 * y
    return initial_state(ScalarField(grid, phi), ScalarField(grid, sigma), params, params.potential())


@lru_cache(maxsize=8)
def _fh_run(size: int, alpha: float, dt: float, n_steps: int):
    """Per-step mean data of the Flory-Huggins scenario."""
    grid = make_grid((size, size), (16.0, 16.0))
    prm = _fh_params(alpha)
    cfg = StepperConfig(dt=dt, params=prm, potential=prm.potential())
    st = _fh_initial(grid, prm)
    rows = []
    prev = [st]

    def cb(s):
        p = prev[0]
        expect = mean_recurrence(float(p.phi.values.mean()), dt, prm)
        rows.append((s.t, abs(float(s.phi.values.mean()) - expect),
                     abs(float(s.sigma.values.mean()) - st.sigma_mean0),
                     abs(float(s.phi.values.mean()) - (prm.c0 + math.exp(-alpha * s.t) * (st.phi_mean0 - prm.c0))),
                     1.0 - float(np.max(np.abs(s.phi.values)))))
        prev[0] = s

    final = run(st, cfg, n_steps=n_steps, callbacks=[cb])
    return np.array(rows), final.clip_events, float(np.max(np.abs(st.phi.values)))


@_timed(120)
def suite_mass(size: int = 64) -> SuiteResult:
    """Discrete mean recurrence, nutrient mass and continuum gap under dt halving."""
    res = SuiteResult("mass")
    dt = 0.01
    for alpha in (0.0, 1.0):
        rows, _, _ = _fh_run(size, alpha, dt, 2000)
        res.lt(f"alpha={alpha:g} recurrence error per step", rows[:, 1].max(), 1e-12)
        res.lt(f"alpha={alpha:g} sigma mean drift", rows[:, 2].max(), 1e-11)
    # continuum vs discrete mean at t = 1
    gaps = []
    for h in (dt, dt / 2):
        rows, _, _ = _fh_run(size, 1.0, h, int(round(1.0 / h)))
        gaps.append(rows[-1, 3])
    res.within("gap ratio dt/(dt/2) at t=1", gaps[0] / gaps[1], 1.8, 2.2)
    res.info["gaps"] = gaps
    return res


@_timed(120)
def suite_separation(size: int = 64) -> SuiteResult:
    """Strict separation and clip-free Flory-Huggins run from separated data."""
    res = SuiteResult("separation")
    rows, clips, init_max = _fh_run(size, 0.0, 0.01, 2000)
    res.le("initial sup|phi0|", init_max, 0.9)
    res.ge("steps", len(rows), 2000)
    res.gt("min separation", rows[:, 4].min(), 0.0)
    res.le("clip events", clips, 0)
    return res


# -- 3: energy dissipation ---------------------------------------------------------

@_timed(120)
def suite_energy(size: int = 64) -> SuiteResult:
    """Quartic spinodal run with conserved mass: total energy never increases."""
    res = SuiteResult("energy")
    grid = make_grid((size, size), (0.4 * size, 0.4 * size))
    prm = PhysParams()
    pot = prm.potential(PotentialKind.QUARTIC)
    S = default_stabilization(pot)
    phi = np.random.default_rng(0).uniform(-0.05, 0.05, grid.shape)
    phi -= phi.mean()
    st = initial_state(ScalarField(grid, phi), ScalarField.constant(grid, 0.0), prm, pot)
    cfg = StepperConfig(dt=0.05, params=prm, potential=pot, stabilization=S)
    E = [total_energy(st, prm, pot)]
    run(st, cfg, n_steps=2000, callbacks=[lambda s: E.append(total_energy(s, prm, pot))])
    dE = np.diff(E)
    res.ge("steps", dE.size, 2000)
    res.le("max energy increase per step", dE.max(), 1e-12)
    res.info.update(S=S, E0=E[0], E_end=E[-1])
    return res


# -- 4: energy-balance residual order ------------------------------------------------

@_timed(300)
def suite_balance(size: int = 64) -> SuiteResult:
    """Observed order of the energy-balance residual in dt."""
    from .diagnostics import Recorder

    res = SuiteResult("balance")
    grid = make_grid((size, size), (16.0, 16.0))
    prm = PhysParams(nu1=1.0, nu2=2.0, chi=0.5, alpha=1.0, beta=0.1, c0=0.0, theta=1.0, theta0=2.0)
    pot = prm.potential()
    st = _fh_initial(grid, prm, noise=False)
    T = 0.02
    R = []
    for dt in (4e-4, 2e-4, 1e-4):
        rec = Recorder(prm, pot)
        run(st, StepperConfig(dt=dt, params=prm, potential=pot), t_end=T, callbacks=[rec])
        R.append(abs(rec.records[-1].energy_balance_residual))
    for a, b, name in ((0, 1, "4e-4 -> 2e-4"), (1, 2, "2e-4 -> 1e-4")):
        res.ge(f"observed order {name}", math.log2(R[a] / R[b]), 0.8)
    res.info["residuals"] = R
    return res


# -- 6, 7: Lyapunov stability and convergence ------------------------------------------

def _lyapunov_params() -> PhysParams:
    return PhysParams(nu1=1.0, nu2=2.0, chi=0.5, alpha=0.0, beta=0.05, c0=0.0, theta=1.0, theta0=3.0)


@lru_cache(maxsize=4)
def _perturbed_run(size: int):
    grid = make_grid((size, size), (3.0, 3.0))
    prm = _lyapunov_params()
    pot = prm.potential()
    ops = Operators(grid)
    x, y = grid.cell_centers()
    m1, m2 = 0.2, 0.5
    guess = 0.7 * np.tanh((x - 1.5) / 0.375) + 0 * y
    guess = guess - guess.mean() + m1
    eq = cho_flow(ScalarField(grid, guess), ScalarField.constant(grid, m2), prm, pot, tol=1e-10)
    rng = np.random.default_rng(3)

    def bump():
        z = ops.solve_neumann(rng.standard_normal(grid.shape), c0=1.0, c1=1.0)
        z -= z.mean()
        return 1e-3 * z / ops.norm(z)

    u = VectorField(grid, tuple(rng.standard_normal(grid.face_shape(d)) for d in range(2))).components
    u, _ = ops.leray_project(u)
    un = ops.face_norm(u)
    v0 = VectorField(grid, tuple(1e-3 * c / un for c in u))
    st = initial_state(ScalarField(grid, eq.phi_inf.values + bump()),
                       ScalarField(grid, eq.sigma_inf.values + bump()), prm, pot, v0)
    init = ops.norm(st.phi.values - eq.phi_inf.values) + ops.norm(st.sigma.values - eq.sigma_inf.values)
    t, lya, dist = [], [], []

    def cb(s):
        d = distance_to_equilibrium(s, eq, ops)
        t.append(s.t)
        lya.append(ops.norm(s.phi.values - eq.phi_inf.values) + d.l2_sigma)
        dist.append(d.l2_v + d.h1_phi + d.l2_sigma)

    final = run(st, StepperConfig(dt=0.01, params=prm, potential=pot), t_end=20.0, callbacks=[cb])
    return eq, init, np.array(t), np.array(lya), np.array(dist), final


@_timed(300)
def suite_lyapunov(size: int = 32) -> SuiteResult:
    """Perturbations of a stable equilibrium stay within 10x their size."""
    res = SuiteResult("lyapunov")
    eq, init, t, lya, _, _ = _perturbed_run(size)
    res.true("equilibrium converged", eq.converged)
    res.gt("equilibrium is non-uniform (phi spread)", float(np.ptp(eq.phi_inf.values)), 0.1)
    res.ge("t_end", t[-1], 20.0 - 1e-9)
    res.le("max deviation / initial perturbation", lya.max() / init, 10.0)
    return res


def windowed_max_monotone(d: np.ndarray, n_windows: int = 10) -> bool:
    maxima = [w.max() for w in np.array_split(d, n_windows)]
    return all(b <= a for a, b in zip(maxima, maxima[1:]))


@_timed(300)
def suite_convergence(size: int = 32) -> SuiteResult:
    """Decay to the equilibrium and the fitted rate law."""
    res = SuiteResult("convergence")
    _, _, t, _, dist, _ = _perturbed_run(size)
    res.true("windowed maxima non-increasing", windowed_max_monotone(dist))
    res.lt("final distance", dist[-1], 1e-6)
    fit = fit_convergence_rate(t, dist)
    ok = fit.flagged_exponential or (0.0 < fit.kappa < 0.5 and fit.r_squared > 0.98)
    res.true("rate fit: exponential flag or kappa in (0,1/2) with r^2 > 0.98", ok)
    res.info.update(kappa=fit.kappa, r_squared=fit.r_squared, flagged_exponential=fit.flagged_exponential,
                    exp_rate=fit.exp_rate)
    return res


# -- 8: equilibrium cross-validation ------------------------------------------------------

@_timed(180)
def suite_equilibrium(size: int = 32) -> SuiteResult:
    """Gradient flow and reduced solve reach the same equilibrium."""
    res = SuiteResult("equilibrium")
    grid = make_grid((size, size), (8.0, 8.0))
    prm = PhysParams(nu1=1.0, nu2=1.0, chi=0.5, alpha=0.0, beta=0.1, c0=0.0, theta=1.0, theta0=2.0)
    pot = prm.potential()
    x, y = grid.cell_centers()
    m1, m2 = 0.2, 0.5
    guess = 0.7 * np.tanh(x - 4.0) + 0 * y
    guess = ScalarField(grid, guess - guess.mean() + m1)
    a = cho_flow(guess, ScalarField.constant(grid, m2), prm, pot, tol=1e-9)
    b = reduced_equilibrium(guess, m1, m2, prm, pot, tol=1e-9)
    ops = Operators(grid)
    for tag, r in (("cho_flow", a), ("reduced", b)):
        r1, r2 = stationary_residual(r.phi_inf, r.sigma_inf, prm, pot)
        res.lt(f"{tag} r1", r1, 1e-8)
        res.lt(f"{tag} r2 = ||grad(sigma - chi phi)||", r2, 1e-8)
        w = r.sigma_inf.values - prm.chi * r.phi_inf.values
        res.lt(f"{tag} spread of sigma - chi phi", float(np.ptp(w)), 1e-7)
    res.le("L2 distance phi", ops.norm(a.phi_inf.values - b.phi_inf.values), 1e-6)
    res.le("L2 distance sigma", ops.norm(a.sigma_inf.values - b.sigma_inf.values), 1e-6)
    res.true("cho_flow energy non-increasing", a.energy_monotone)
    return res


# -- 9: rate-fit self test -------------------------------------------------------------------

@_timed(1)
def suite_ratefit(size: int | None = None) -> SuiteResult:
    """Synthetic power laws and an exponential through the rate fit."""
    res = SuiteResult("ratefit")
    t = np.linspace(0.0, 200.0, 801)
    for p, kappa in ((1.0, 1.0 / 3.0), (3.0, 3.0 / 7.0)):
        fit = fit_convergence_rate(t, (1.0 + t) ** -p)
        res.le(f"p={p:g} kappa relative error", abs(fit.kappa - kappa) / kappa, 0.01)
        res.true(f"p={p:g} not flagged exponential", not fit.flagged_exponential)
    te = np.linspace(0.0, 20.0, 201)
    res.true("exp(-t) flagged exponential", fit_convergence_rate(te, np.exp(-te)).flagged_exponential)
    return res


# -- 10: shift identity ------------------------------------------------------------------------

@_timed(10)
def suite_shift(size: int | None = None) -> SuiteResult:
    """``F = F_reduced + ||sigma - chi phi||^2 / 2`` on random admissible pairs."""
    res = SuiteResult("shift")
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(50):
        nd = 2 if i % 3 else 3
        dims = tuple(int(n) for n in rng.integers(4, 12 if nd == 2 else 7, size=nd))
        grid = make_grid(dims, tuple(rng.uniform(0.5, 3.0, size=nd)))
        theta0 = rng.uniform(1.2, 3.0)
        prm = PhysParams(chi=rng.uniform(-2, 2), beta=rng.uniform(0, 2), c0=rng.uniform(-0.5, 0.5),
                         theta=1.0, theta0=theta0)
        kind = PotentialKind.FLORY_HUGGINS if i % 2 else PotentialKind.QUARTIC
        pot = prm.potential(kind)
        phi = ScalarField(grid, rng.uniform(-0.95, 0.95, grid.shape))
        sigma = ScalarField(grid, rng.normal(0.0, 1.0, grid.shape))
        ops = Operators(grid)
        F = free_energy(phi, sigma, prm, pot, ops)
        w = sigma.values - prm.chi * phi.values
        rhs = reduced_energy(phi, prm, pot, ops) + 0.5 * ops.norm(w) ** 2
        worst = max(worst, abs(F - rhs) / max(abs(F), abs(rhs), 1e-300))
    res.le("max relative defect over 50 pairs", worst, 1e-10)
    return res


SUITES = {
    "operators": suite_operators,
    "mass": suite_mass,
    "energy": suite_energy,
    "balance": suite_balance,
    "separation": suite_separation,
    "lyapunov": suite_lyapunov,
    "convergence": suite_convergence,
    "equilibrium": suite_equilibrium,
    "ratefit": suite_ratefit,
    "shift": suite_shift,
}

# acceptance criterion number -> suite
CRITERIA = {1: "operators", 2: "mass", 3: "energy", 4: "balance", 5: "separation", 6: "lyapunov",
            7: "convergence", 8: "equilibrium", 9: "ratefit", 10: "shift"}


def run_suite(name: str, size: int | None = None) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown suite '{name}' (choose from {', '.join(SUITES)})")
    return SUITES[name](size)
