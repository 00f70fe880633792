"""Energies, dissipation, mass laws, monitors and decay-rate fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .evolution import SimState, chemical_potential
from .grid import ScalarField
from .operators import Operators, operators_for
from .potentials import PhysParams, PotentialSpec, psi, viscosity


def _ops(grid, ops):
    return ops if ops is not None else operators_for(grid)


def free_energy(phi: ScalarField, sigma: ScalarField, params: PhysParams,
                potential: PotentialSpec, ops: Operators | None = None) -> float:
    """Midpoint-rule free energy with face-centred gradient term."""
    ops = _ops(phi.grid, ops)
    f = phi.values
    s = sigma.values
    grad = 0.5 * ops.face_norm(ops.gradient(f)) ** 2
    bulk = ops.inner(np.ones_like(f), psi(potential, f) + 0.5 * s * s - params.chi * s * f)
    nonlocal_ = 0.0
    if params.beta:
        nonlocal_ = 0.5 * params.beta * ops.norm_v0_dual(f - f.mean()) ** 2
    return float(grad + bulk + nonlocal_)


def reduced_energy(phi: ScalarField, params: PhysParams, potential: PotentialSpec,
                   ops: Operators | None = None) -> float:
    """``int |grad phi|^2/2 + Psi(phi) - chi^2 phi^2/2 + beta/2 |grad N(phi - mean)|^2``."""
    ops = _ops(phi.grid, ops)
    f = phi.values
    val = 0.5 * ops.face_norm(ops.gradient(f)) ** 2
    val += ops.inner(np.ones_like(f), psi(potential, f) - 0.5 * params.chi ** 2 * f * f)
    if params.beta:
        val += 0.5 * params.beta * ops.norm_v0_dual(f - f.mean()) ** 2
    return float(val)


def free_energy_lower_bound(grid, params: PhysParams, potential: PotentialSpec) -> float:
    """``|Omega| min_r (Psi(r) - chi^2 r^2 / 2)`` from completing the square in sigma."""
    c2 = params.chi ** 2
    if potential.singular:
        res = minimize_scalar(lambda r: float(psi(potential, r)) - 0.5 * c2 * r * r,
                              bounds=(0.0, 1.0 - potential.clip_delta), method="bounded",
                              options={"xatol": 1e-12})
        rs = np.linspace(0.0, 1.0 - potential.clip_delta, 2001)
        m = min(res.fun, float(np.min(psi(potential, rs) - 0.5 * c2 * rs * rs)))
    else:
        m = -0.5 * c2 - 0.25 * c2 * c2
    return grid.volume * m


def kinetic_energy(state: SimState, ops: Operators | None = None) -> float:
    ops = _ops(state.grid, ops)
    return 0.5 * ops.face_norm(state.v.components) ** 2


def total_energy(state: SimState, params: PhysParams, potential: PotentialSpec,
                 ops: Operators | None = None) -> float:
    ops = _ops(state.grid, ops)
    return kinetic_energy(state, ops) + free_energy(state.phi, state.sigma, params, potential, ops)


def pure_mu(state: SimState, params: PhysParams, potential: PotentialSpec, ops=None) -> np.ndarray:
    return chemical_potential(state.phi, state.sigma, params, potential, _ops(state.grid, ops)).values


def dissipation(state: SimState, params: PhysParams, potential: PotentialSpec,
                ops: Operators | None = None, mu: np.ndarray | None = None) -> float:
    """``int 2 nu |Dv|^2 + ||grad mu||^2 + ||grad(sigma - chi phi)||^2`` with the PDE's mu."""
    ops = _ops(state.grid, ops)
    if mu is None:
        mu = pure_mu(state, params, potential, ops)
    w = state.sigma.values - params.chi * state.phi.values
    visc = ops.viscous_dissipation(state.v.components, viscosity(params, state.phi.values))
    return float(visc + ops.face_norm(ops.gradient(mu)) ** 2 + ops.face_norm(ops.gradient(w)) ** 2)


class MassReport(NamedTuple):
    phi_mean: float
    predicted: float
    abs_error: float
    abs_error_discrete: float
    sigma_drift: float


def predicted_mean(t: float, phi_mean0: float, params: PhysParams) -> float:
    return params.c0 + math.exp(-params.alpha * t) * (phi_mean0 - params.c0)


def mass_report(state: SimState, params: PhysParams) -> MassReport:
    m = float(state.phi.values.mean())
    pred = predicted_mean(state.t, state.phi_mean0, params)
    return MassReport(m, pred, abs(m - pred), abs(m - state.phi_mean_discrete),
                      abs(float(state.sigma.values.mean()) - state.sigma_mean0))


def _transport_integral(state: SimState, mu: np.ndarray, ops: Operators) -> float:
    """``int (v . grad phi) mu`` on faces."""
    gphi = ops.gradient(state.phi.values)
    mu_f = ops.face_average(mu)
    return ops.face_inner(state.v.components, tuple(g * m for g, m in zip(gphi, mu_f)))


def higher_monitor(state: SimState, params: PhysParams, potential: PotentialSpec,
                   a1: float = 0.1, ops: Operators | None = None, mu: np.ndarray | None = None) -> float:
    """Higher-order monitor built from velocity gradient, grad mu and grad(sigma - chi phi)."""
    if not 0.0 < a1 < 1.0:
        raise ValueError("a1 must lie in (0, 1)")
    ops = _ops(state.grid, ops)
    if mu is None:
        mu = pure_mu(state, params, potential, ops)
    w = state.sigma.values - params.chi * state.phi.values
    gv = ops.velocity_gradient_norm(state.v.components)
    gm = ops.face_norm(ops.gradient(mu))
    gw = ops.face_norm(ops.gradient(w))
    lam = 0.5 * gv ** 2 + 0.5 * a1 * gm ** 2 + 0.5 * gw ** 2
    lam += a1 * _transport_integral(state, mu, ops)
    lam += a1 * params.alpha * (state.phi.values.mean() - params.c0) * ops.inner(np.ones_like(mu), mu)
    return float(lam)


def higher_monitor_slack(state: SimState, params: PhysParams, potential: PotentialSpec,
                         a1: float = 0.1, ops: Operators | None = None) -> float:
    """Amount by which the monitor falls short of half its quadratic part (0 if it does not)."""
    ops = _ops(state.grid, ops)
    mu = pure_mu(state, params, potential, ops)
    w = state.sigma.values - params.chi * state.phi.values
    quarter = 0.25 * (ops.velocity_gradient_norm(state.v.components) ** 2
                      + a1 * ops.face_norm(ops.gradient(mu)) ** 2
                      + ops.face_norm(ops.gradient(w)) ** 2)
    return max(0.0, quarter - higher_monitor(state, params, potential, a1, ops, mu))


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    step: int
    E_total: float
    F_free: float
    D_diss: float
    phi_mean: float
    phi_mean_predicted: float
    phi_mean_err: float
    sigma_mean: float
    sigma_drift: float
    separation: float
    grad_mu_norm: float
    grad_sigchi_norm: float
    v_h1_norm: float
    Lambda: float
    energy_balance_residual: float = math.nan
    mu_integral: float = 0.0


def record_of(state: SimState, params: PhysParams, potential: PotentialSpec, a1: float = 0.1,
              prev: DiagnosticsRecord | None = None, ops: Operators | None = None) -> DiagnosticsRecord:
    ops = _ops(state.grid, ops)
    mu = pure_mu(state, params, potential, ops)
    w = state.sigma.values - params.chi * state.phi.values
    F = free_energy(state.phi, state.sigma, params, potential, ops)
    mass = mass_report(state, params)
    rec = DiagnosticsRecord(
        t=state.t, step=state.step,
        E_total=kinetic_energy(state, ops) + F, F_free=F,
        D_diss=dissipation(state, params, potential, ops, mu),
        phi_mean=mass.phi_mean, phi_mean_predicted=mass.predicted, phi_mean_err=mass.abs_error,
        sigma_mean=float(state.sigma.values.mean()), sigma_drift=mass.sigma_drift,
        separation=1.0 - float(np.max(np.abs(state.phi.values))),
        grad_mu_norm=ops.face_norm(ops.gradient(mu)),
        grad_sigchi_norm=ops.face_norm(ops.gradient(w)),
        v_h1_norm=ops.velocity_gradient_norm(state.v.components),
        Lambda=higher_monitor(state, params, potential, a1, ops, mu),
        mu_integral=ops.inner(np.ones_like(mu), mu),
    )
    if prev is not None:
        rec = _with_residual(rec, energy_balance_residual(prev, rec, params))
    return rec


def _with_residual(rec: DiagnosticsRecord, r: float) -> DiagnosticsRecord:
    d = {f.name: getattr(rec, f.name) for f in fields(rec)}
    d["energy_balance_residual"] = r
    return DiagnosticsRecord(**d)


def energy_balance_residual(prev: DiagnosticsRecord, curr: DiagnosticsRecord, params: PhysParams) -> float:
    """``(E1 - E0)/dt + D1 + alpha (mean phi1 - c0) int mu1``."""
    dt = curr.t - prev.t
    if not dt > 0 or curr.step != prev.step + 1:
        raise ValueError("energy balance needs consecutive records")
    return ((curr.E_total - prev.E_total) / dt + curr.D_diss
            + params.alpha * (curr.phi_mean - params.c0) * curr.mu_integral)


class Recorder:
    """Run callback collecting a DiagnosticsRecord every ``every`` steps.

    Consecutive records (``every == 1``) also carry the energy-balance residual.
    """

    def __init__(self, params: PhysParams, potential: PotentialSpec, every: int = 1, a1: float = 0.1):
        if every < 1:
            raise ValueError("every must be >= 1")
        self.params = params
        self.potential = potential
        self.every = every
        self.a1 = a1
        self.records: list[DiagnosticsRecord] = []

    def record(self, state: SimState) -> DiagnosticsRecord:
        prev = self.records[-1] if self.records else None
        if prev is not None and state.step != prev.step + 1:
            prev = None
        rec = record_of(state, self.params, self.potential, self.a1, prev)
        self.records.append(rec)
        return rec

    def __call__(self, state: SimState) -> None:
        if state.step % self.every == 0:
            self.record(state)


class Distance(NamedTuple):
    l2_v: float
    h1_phi: float
    l2_sigma: float
    dual_phi: float
    dual_sigma: float


def dual_norm(f: np.ndarray, ops: Operators) -> float:
    """``(||f - mean f||_{V0'}^2 + mean(f)^2)^{1/2}``."""
    m = float(f.mean())
    return math.sqrt(ops.norm_v0_dual(f - m) ** 2 + m * m)


def distance_to_equilibrium(state: SimState, eq, ops: Operators | None = None) -> Distance:
    if eq.phi_inf.grid != state.grid or eq.sigma_inf.grid != state.grid:
        raise ValueError("state and equilibrium live on different grids")
    ops = _ops(state.grid, ops)
    e = state.phi.values - eq.phi_inf.values
    s = state.sigma.values - eq.sigma_inf.values
    h1 = math.sqrt(ops.norm(e) ** 2 + ops.face_norm(ops.gradient(e)) ** 2)
    return Distance(ops.face_norm(state.v.components), h1, ops.norm(s), dual_norm(e, ops), dual_norm(s, ops))


@dataclass(frozen=True)
class RateFit:
    kappa: float
    exponent: float
    r_squared: float
    window: tuple[float, float]
    flagged_exponential: bool
    exp_rate: float = math.nan
    n_points: int = 0


def default_window(t: np.ndarray, d: np.ndarray) -> tuple[float, float]:
    """Last 60% of the series after ``d`` first drops below 10% of its maximum."""
    below = np.nonzero(d < 0.1 * d.max())[0]
    t0 = t[below[0]] if below.size else t[0]
    t1 = t[-1]
    return (t1 - 0.6 * (t1 - t0), t1)


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return coef, float(resid @ resid)


def fit_convergence_rate(t: Sequence[float], d: Sequence[float],
                         window: tuple[float, float] | None = None) -> RateFit:
    """Fit ``d ~ C (1+t)^(-p)`` and return ``kappa = p / (1 + 2p)``.

    The series is flagged exponential when a straight line in ``(t, log d)``
    fits better than one in ``(log(1+t), log d)``.
    """
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if t.shape != d.shape or t.ndim != 1:
        raise ValueError("t and d must be 1D of equal length")
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be positive and finite")
    if window is None:
        window = default_window(t, d)
    sel = (t >= window[0]) & (t <= window[1])
    if np.count_nonzero(sel) < 8:
        raise ValueError(f"need at least 8 points in window {window}, got {np.count_nonzero(sel)}")
    ts, ld = t[sel], np.log(d[sel])
    (slope, _), ss_pow = _linfit(np.log1p(ts), ld)
    (erate, _), ss_exp = _linfit(ts, ld)
    ss_tot = float(np.sum((ld - ld.mean()) ** 2))
    r2 = 1.0 - ss_pow / ss_tot if ss_tot > 0 else 1.0
    p = -slope
    if p <= 0:
        raise ValueError("series does not decay over the window")
    kappa = p / (1.0 + 2.0 * p)
    flagged = erate < 0 and ss_exp < ss_pow
    return RateFit(kappa=kappa, exponent=p, r_squared=r2, window=(float(window[0]), float(window[1])),
                   flagged_exponential=bool(flagged), exp_rate=-erate, n_points=int(ts.size))


def modified_energy_monotone(records: Sequence[DiagnosticsRecord], params: PhysParams,
                             coefficients: Sequence[float] = tuple(np.geomspace(1e-3, 1e3, 25)),
                             tol: float = 1e-12):
    """Scan coefficients ``L`` for which ``E + L exp(-alpha t)|mean phi0 - c0|`` is non-increasing.

    Returns the smallest working coefficient, or None.
    """
    if len(records) < 2:
        return None
    t = np.array([r.t for r in records])
    E = np.array([r.E_total for r in records])
    gap = abs(records[0].phi_mean_predicted - params.c0)
    decay = np.exp(-params.alpha * (t - t[0])) * gap
    for L in sorted(coefficients):
        if np.all(np.diff(E + L * decay) <= tol):
            return float(L)
    return None
