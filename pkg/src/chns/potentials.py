"""Bulk free-energy densities, viscosity law and initial-datum regularisation."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.sparse import diags
from scipy.sparse.linalg import spsolve

from .grid import ScalarField


class PotentialKind(str, enum.Enum):
    FLORY_HUGGINS = "FloryHuggins"
    QUARTIC = "Quartic"


@dataclass(frozen=True)
class PotentialSpec:
    kind: PotentialKind = PotentialKind.FLORY_HUGGINS
    theta: float = 1.0
    theta0: float = 2.0
    clip_delta: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "kind", PotentialKind(self.kind))
        if not 0.0 < self.clip_delta < 0.5:
            raise ValueError("clip_delta must lie in (0, 0.5)")
        if self.kind is PotentialKind.FLORY_HUGGINS and not 0.0 < self.theta < self.theta0:
            raise ValueError("FloryHuggins requires 0 < theta < theta0 (H2)")

    @property
    def singular(self) -> bool:
        return self.kind is PotentialKind.FLORY_HUGGINS


@dataclass(frozen=True)
class PhysParams:
    nu1: float = 1.0
    nu2: float = 1.0
    chi: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    c0: float = 0.0
    theta: float = 1.0
    theta0: float = 2.0
    gamma: float = 0.0
    epsilon: float = 1.0

    def __post_init__(self):
        if self.nu1 <= 0 or self.nu2 <= 0:
            raise ValueError("viscosities nu1, nu2 must be positive")
        if not 0.0 < self.theta < self.theta0:
            raise ValueError("requires theta < theta0 with both positive (H2)")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative (H4)")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not -1.0 < self.c0 < 1.0:
            raise ValueError("c0 must lie in (-1,1) (H4)")
        if self.epsilon != 1.0:
            raise ValueError("epsilon is fixed at 1")

    def potential(self, kind=PotentialKind.FLORY_HUGGINS, clip_delta: float = 1e-9) -> PotentialSpec:
        return PotentialSpec(kind, self.theta, self.theta0, clip_delta)


def _check_finite(r):
    r = np.asarray(r, dtype=float)
    if np.isnan(r).any():
        raise ValueError("NaN passed to potential")
    return r


def clip_range(spec: PotentialSpec, r):
    r = _check_finite(r)
    if not spec.singular:
        return r
    n_out = int(np.count_nonzero(np.abs(r) >= 1.0))
    if n_out:
        warnings.warn(f"{n_out} value(s) with |r| >= 1 clamped for the Flory-Huggins potential",
                      RuntimeWarning, stacklevel=3)
    bound = 1.0 - spec.clip_delta
    return np.clip(r, -bound, bound)


def count_clips(spec: PotentialSpec, r) -> int:
    """Number of entries that evaluation would clamp."""
    if not spec.singular:
        return 0
    return int(np.count_nonzero(np.abs(r) > 1.0 - spec.clip_delta))


def psi(spec: PotentialSpec, r):
    r = clip_range(spec, r)
    if spec.singular:
        return (0.5 * spec.theta * ((1 - r) * np.log1p(-r) + (1 + r) * np.log1p(r))
                + 0.5 * spec.theta0 * (1 - r * r))
    return 0.25 * (1 - r * r) ** 2


def psi_prime(spec: PotentialSpec, r):
    r = clip_range(spec, r)
    if spec.singular:
        return spec.theta * np.arctanh(r) - spec.theta0 * r
    return r ** 3 - r


def psi_double_prime(spec: PotentialSpec, r):
    r = clip_range(spec, r)
    if spec.singular:
        return spec.theta / (1 - r * r) - spec.theta0
    return 3 * r * r - 1


def psi0_prime(spec: PotentialSpec, r):
    """Derivative of the convex part ``Psi0 = Psi + theta0 r^2 / 2``."""
    return psi_prime(spec, r) + spec.theta0 * clip_range(spec, r)


def psi0_double_prime(spec: PotentialSpec, r):
    return psi_double_prime(spec, r) + spec.theta0


def binodal(spec: PotentialSpec) -> float:
    """Positive root of Psi' (pure-phase value of a deep quench)."""
    if not spec.singular:
        return 1.0
    if spec.theta >= spec.theta0:
        return 0.0
    f = lambda r: spec.theta * np.arctanh(r) - spec.theta0 * r
    return brentq(f, 1e-12, 1.0 - 1e-15)


def default_stabilization(spec: PotentialSpec, r_max: float = 0.0) -> float:
    """Stabilisation constant for the explicit potential term.

    Quartic: 1.  Flory-Huggins: half the largest Psi'' over the range the
    solution can visit, ``[-r*, r*]`` with ``r* = max(r_max, binodal)``,
    plus ``theta0 / 2``.
    """
    if not spec.singular:
        return 1.0
    r_star = min(max(abs(r_max), binodal(spec)), 1.0 - spec.clip_delta)
    return 0.5 * float(psi_double_prime(spec, r_star)) + 0.5 * spec.theta0


_CORNER_WIDTH = 0.05


def smooth_clamp(r, width: float = _CORNER_WIDTH):
    """C2 clamp of ``r`` to [-1, 1]; identity for ``|r| <= 1 - width``."""
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    s = np.clip((a - (1.0 - width)) / (2.0 * width), 0.0, 1.0)
    blended = (1.0 - width) + 2.0 * width * (s - s ** 3 + 0.5 * s ** 4)
    out = np.where(a <= 1.0 - width, a, blended)
    return np.sign(r) * out


def viscosity(params: PhysParams, r):
    rh = smooth_clamp(_check_finite(r))
    return params.nu1 * 0.5 * (1 + rh) + params.nu2 * 0.5 * (1 - rh)


def cutoff_hk(k: float, r):
    if k <= 0:
        raise ValueError("cut-off level k must be positive")
    return np.clip(r, -k, k)


class RegularizationError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


def regularize_initial_phi(phi0: ScalarField, k: float, ops, spec: PotentialSpec,
                           tol: float = 1e-10, max_iter: int = 50) -> ScalarField:
    """Replace ``phi0`` by a strictly separated datum with cut-off chemical potential.

    Solves ``-Lap phi + Psi0'(phi) = h_k(-Lap phi0 + Psi0'(phi0))`` under
    homogeneous Neumann conditions with damped Newton iteration.
    """
    if not spec.singular:
        raise ValueError("initial-datum regularisation needs the Flory-Huggins potential")
    grid = phi0.grid
    p0 = phi0.values
    if np.max(np.abs(p0)) > 1.0 or abs(p0.mean()) >= 1.0:
        raise ValueError("phi0 must satisfy |phi0| <= 1 and |mean(phi0)| < 1")
    rhs = cutoff_hk(k, -ops.laplacian(p0) + psi0_prime(spec, p0))
    L = ops.laplacian_matrix()
    theta = spec.theta

    def residual(phi):
        return -ops.laplacian(phi) + theta * np.arctanh(phi) - rhs

    def norm(r):
        return np.sqrt(grid.cell_volume * np.sum(r * r))

    phi = np.tanh(rhs / theta)
    res = residual(phi)
    rn = norm(res)
    for _ in range(max_iter):
        if rn < tol:
            return ScalarField(grid, phi)
        J = -L + diags(theta / (1 - phi.ravel() ** 2))
        step = spsolve(J.tocsc(), -res.ravel()).reshape(grid.shape)
        lam = 1.0
        while lam > 1e-8:
            trial = phi + lam * step
            if np.max(np.abs(trial)) < 1.0:
                tres = residual(trial)
                tn = norm(tres)
                if tn <= (1.0 - 1e-4 * lam) * rn:
                    break
            lam *= 0.5
        else:
            raise RegularizationError("Newton line search failed", rn)
        phi, res, rn = trial, tres, tn
    if rn < tol:
        return ScalarField(grid, phi)
    raise RegularizationError("Newton did not converge", rn)


def regularize_initial_sigma(sigma0: ScalarField, k: float, ops) -> ScalarField:
    """Screened smoothing ``-(1/k) Lap s + s = sigma0``; preserves the mean."""
    if k <= 0:
        raise ValueError("k must be positive")
    out = ops.solve_neumann(sigma0.values, c0=1.0, c1=1.0 / k)
    return ScalarField(sigma0.grid, out)
