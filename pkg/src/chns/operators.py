"""Discrete operators on the MAC grid.

Scalars are cell-centred arrays of shape ``grid.shape``; velocities are
tuples of face arrays in spatial order (see :mod:`chns.grid`).  Gradients
live on faces and vanish on boundary faces, so ``laplacian == divergence o
gradient`` is the 5-/7-point Neumann Laplacian and the pair
(divergence, -gradient) is exactly adjoint for the volume-weighted inner
products.

Constant-coefficient Neumann problems are diagonalised by the type-II DCT,
which is the default solver; preconditioned conjugate gradients and dense
linear algebra are kept as alternative routes and oracles.
"""

from __future__ import annotations

import enum
import os
import warnings
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.fft import dctn, idctn

from .grid import Grid


def fft_workers() -> int | None:
    """Worker cap from ``CHNS_THREADS``; None means the library default."""
    raw = os.environ.get("CHNS_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("CHNS_THREADS must be a positive integer")
    return n


class SolverError(RuntimeError):
    pass


class NotZeroMean(ValueError):
    pass


class SolveMethod(str, enum.Enum):
    SPECTRAL = "Spectral"
    CG = "ConjugateGradient"
    DENSE = "DirectDense"


DENSE_LIMIT = 65536


@dataclass(frozen=True)
class LinearSolveConfig:
    method: SolveMethod = SolveMethod.SPECTRAL
    tol: float = 1e-10
    max_iter: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", SolveMethod(self.method))
        if not 0.0 < self.tol < 1.0:
            raise ValueError("solver tolerance must lie in (0, 1)")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be positive")


def pcg(matvec, b, diag, tol, max_iter, x0=None, project=None):
    """Jacobi-preconditioned CG; ``project`` is applied to iterates (e.g. zero mean)."""
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - matvec(x)
    if project is not None:
        r = project(r)
    z = r / diag
    if project is not None:
        z = project(z)
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("conjugate gradient met a non-positive curvature direction")
        a = rz / pAp
        x += a * p
        r -= a * Ap
        if project is not None:
            x = project(x)
            r = project(r)
        z = r / diag
        if project is not None:
            z = project(z)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= tol * bnorm:
        return x
    raise SolverError(f"conjugate gradient did not converge in {max_iter} iterations "
                      f"(relative residual {np.linalg.norm(r) / bnorm:.2e})")


def _sl(ndim, axis, s):
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def _avg_to_cells(u, axis):
    n = u.ndim
    return 0.5 * (u[_sl(n, axis, slice(1, None))] + u[_sl(n, axis, slice(None, -1))])


def _avg_to_faces(f, axis, boundary):
    """Average a centred array onto staggered positions along ``axis``.

    ``boundary='mirror'`` copies the adjacent value (Neumann ghost);
    ``boundary='zero'`` uses the odd ghost of a no-slip wall.
    """
    n = f.ndim
    shape = list(f.shape)
    shape[axis] += 1
    out = np.zeros(shape)
    out[_sl(n, axis, slice(1, -1))] = 0.5 * (f[_sl(n, axis, slice(1, None))] + f[_sl(n, axis, slice(None, -1))])
    if boundary == "mirror":
        out[_sl(n, axis, 0)] = f[_sl(n, axis, 0)]
        out[_sl(n, axis, -1)] = f[_sl(n, axis, -1)]
    return out


# 1D building blocks for sparse assembly -------------------------------------

def _d_face_to_cell(n, h):
    return sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1)) / h


def _d_cell_to_face_noslip(n, h):
    m = sp.lil_matrix((n + 1, n))
    m[0, 0] = 2.0
    for i in range(1, n):
        m[i, i - 1] = -1.0
        m[i, i] = 1.0
    m[n, n - 1] = -2.0
    return m.tocsr() / h


def _avg_cell_to_face_mirror(n):
    m = sp.lil_matrix((n + 1, n))
    m[0, 0] = 1.0
    for i in range(1, n):
        m[i, i - 1] = 0.5
        m[i, i] = 0.5
    m[n, n - 1] = 1.0
    return m.tocsr()


def _interior_embedding(n):
    return sp.csr_matrix((np.ones(n - 1), (np.arange(1, n), np.arange(n - 1))), shape=(n + 1, n - 1))


def _kron_all(mats):
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return sp.csr_matrix(out)


def _face_weights(n):
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return w


class Operators:
    """Operator toolbox bound to one grid."""

    def __init__(self, grid: Grid, linear: LinearSolveConfig | None = None):
        self.grid = grid
        self.linear = linear or LinearSolveConfig()
        self.V = grid.cell_volume

    # -- inner products --------------------------------------------------
    def inner(self, f, g) -> float:
        return float(np.sum(f * g) * self.V)

    def norm(self, f) -> float:
        return float(np.sqrt(np.sum(f * f) * self.V))

    def face_inner(self, u, w) -> float:
        """Inner product of face fields; boundary normal faces carry no weight."""
        total = 0.0
        for d, (a, b) in enumerate(zip(u, w)):
            ax = self.grid.axis_of(d)
            total += np.sum((a * b)[_sl(a.ndim, ax, slice(1, -1))])
        return float(total * self.V)

    def face_norm(self, u) -> float:
        return float(np.sqrt(self.face_inner(u, u)))

    # -- stencils ----------------------------------------------------------
    def gradient(self, f):
        g = self.grid
        out = []
        for d in range(g.ndim):
            ax = g.axis_of(d)
            c = np.zeros(g.face_shape(d))
            c[_sl(g.ndim, ax, slice(1, -1))] = np.diff(f, axis=ax) / g.h_axes[ax]
            out.append(c)
        return tuple(out)

    def divergence(self, u):
        g = self.grid
        out = np.zeros(g.shape)
        for d in range(g.ndim):
            ax = g.axis_of(d)
            out += np.diff(u[d], axis=ax) / g.h_axes[ax]
        return out

    def laplacian(self, f):
        return self.divergence(self.gradient(f))

    def face_average(self, f):
        """Centred scalar averaged to every face (mirror ghosts on walls)."""
        g = self.grid
        return tuple(_avg_to_faces(f, g.axis_of(d), "mirror") for d in range(g.ndim))

    def convect(self, u, f, check=True):
        """Conservative transport term ``div(u f)`` with centred face values."""
        if check:
            div = self.divergence(u)
            scale = max(max(np.max(np.abs(c)) for c in u), 1e-300)
            if np.max(np.abs(div)) > 1e-6 * scale * max(1.0 / h for h in self.grid.spacing):
                warnings.warn("convect: velocity is not discretely divergence-free", RuntimeWarning)
        fa = self.face_average(f)
        return self.divergence(tuple(c * a for c, a in zip(u, fa)))

    def advect_momentum(self, u):
        """Explicit conservative momentum flux ``div(u (x) u)`` on interior faces."""
        g = self.grid
        n = g.ndim
        out = []
        for d in range(n):
            a = g.axis_of(d)
            res = np.zeros(g.face_shape(d))
            acc = np.zeros(res.shape)
            for e in range(n):
                b = g.axis_of(e)
                if e == d:
                    ub = _avg_to_cells(u[d], a)
                    flux = ub * ub
                    inner = np.diff(flux, axis=a) / g.h_axes[a]
                    acc[_sl(n, a, slice(1, -1))] += inner
                else:
                    U = _avg_to_faces(u[e], a, "zero")
                    Phi = _avg_to_faces(u[d], b, "zero")
                    acc += np.diff(U * Phi, axis=b) / g.h_axes[b]
            res[_sl(n, a, slice(1, -1))] = acc[_sl(n, a, slice(1, -1))]
            out.append(res)
        return tuple(out)

    # -- sparse matrices ---------------------------------------------------
    @cached_property
    def _lap_matrix(self):
        g = self.grid
        mats = []
        for a in range(g.ndim):
            n, h = g.shape[a], g.h_axes[a]
            D = _d_face_to_cell(n, h)
            G = (-D.T).tolil()
            G[0, :] = 0
            G[n, :] = 0
            L1 = (D @ G.tocsr()).tocsr()
            mats.append(_kron_all([L1 if k == a else sp.identity(g.shape[k], format="csr")
                                   for k in range(g.ndim)]))
        return sum(mats[1:], mats[0]).tocsr()

    def laplacian_matrix(self):
        return self._lap_matrix

    @cached_property
    def _lap_diag(self):
        return self._lap_matrix.diagonal()

    @cached_property
    def _lap2_diag(self):
        L = self._lap_matrix
        return np.asarray(L.multiply(L).sum(axis=1)).ravel()

    @cached_property
    def symbol(self):
        """Eigenvalues of the Neumann Laplacian in the DCT-II basis."""
        g = self.grid
        lam = np.zeros(g.shape)
        for a in range(g.ndim):
            n, h = g.shape[a], g.h_axes[a]
            k = np.arange(n)
            la = -4.0 / h ** 2 * np.sin(np.pi * k / (2 * n)) ** 2
            shape = [1] * g.ndim
            shape[a] = n
            lam = lam + la.reshape(shape)
        return lam

    # -- constant-coefficient Neumann solves --------------------------------
    def solve_neumann(self, rhs, c0=0.0, c1=0.0, c2=0.0, method=None):
        """Solve ``(c0 - c1 Lap + c2 Lap^2) u = rhs`` with Neumann conditions.

        With ``c0 == 0`` the operator is singular: ``rhs`` must have zero
        mean and the zero-mean solution is returned.
        """
        method = SolveMethod(method or self.linear.method)
        singular = c0 == 0.0
        if singular:
            m = rhs.mean()
            if abs(m) > 1e-10 * np.sqrt(np.mean(rhs * rhs)) + 1e-14:
                raise NotZeroMean(f"right-hand side has mean {m:.3e}")
            if not np.any(rhs):
                return np.zeros_like(rhs)
        if method is SolveMethod.SPECTRAL:
            lam = self.symbol
            sym = c0 - c1 * lam + c2 * lam * lam
            hat = dctn(rhs, type=2, norm="ortho", workers=fft_workers())
            if singular:
                sym = sym.copy()
                sym.flat[0] = 1.0
                hat.flat[0] = 0.0
            out = idctn(hat / sym, type=2, norm="ortho", workers=fft_workers())
            if singular:
                out -= out.mean()
            return out
        L = self._lap_matrix
        if method is SolveMethod.CG:
            def mv(x):
                Lx = L @ x
                y = c0 * x - c1 * Lx
                if c2:
                    y = y + c2 * (L @ Lx)
                return y
            diag = c0 - c1 * self._lap_diag + c2 * self._lap2_diag
            proj = (lambda x: x - x.mean()) if singular else None
            N = self.grid.size
            x = pcg(mv, rhs.ravel(), diag, self.linear.tol, self.linear.max_iter or 10 * N, project=proj)
            return x.reshape(self.grid.shape)
        N = self.grid.size
        if N > DENSE_LIMIT:
            raise SolverError("DirectDense is limited to 65536 unknowns")
        Ld = L.toarray()
        M = c0 * np.eye(N) - c1 * Ld + c2 * Ld @ Ld
        if singular:
            M = M + np.ones((N, N)) / N
        x = np.linalg.solve(M, rhs.ravel())
        if singular:
            x -= x.mean()
        return x.reshape(self.grid.shape)

    def inv_neumann_laplacian(self, f, method=None):
        """Zero-mean solution ``u`` of ``-Lap u = f`` (the operator N)."""
        return self.solve_neumann(f, c1=1.0, method=method)

    def norm_v0_dual(self, f) -> float:
        u = self.inv_neumann_laplacian(f)
        return self.face_norm(self.gradient(u))

    def leray_project(self, u, method=None):
        """Return ``(P u, q)`` with ``P u = u - grad q`` discretely divergence-free."""
        div = self.divergence(u)
        div -= div.mean()
        q = -self.inv_neumann_laplacian(div, method=method)
        gq = self.gradient(q)
        return tuple(a - b for a, b in zip(u, gq)), q

    # -- velocity packing ---------------------------------------------------
    @cached_property
    def _interior_sizes(self):
        g = self.grid
        sizes = []
        for d in range(g.ndim):
            s = list(g.shape)
            s[g.axis_of(d)] -= 1
            sizes.append(int(np.prod(s)))
        return sizes

    def pack(self, u):
        g = self.grid
        return np.concatenate([u[d][_sl(g.ndim, g.axis_of(d), slice(1, -1))].ravel() for d in range(g.ndim)])

    def unpack(self, x):
        g = self.grid
        out = []
        off = 0
        for d in range(g.ndim):
            ax = g.axis_of(d)
            c = np.zeros(g.face_shape(d))
            s = list(g.shape)
            s[ax] -= 1
            n = self._interior_sizes[d]
            c[_sl(g.ndim, ax, slice(1, -1))] = x[off:off + n].reshape(s)
            off += n
            out.append(c)
        return tuple(out)

    # -- viscous operator ---------------------------------------------------
    @cached_property
    def _velocity_gradient_blocks(self):
        """Sparse derivative blocks of the velocity on packed interior unknowns.

        Returns ``(diag_blocks, pair_blocks)``: ``diag_blocks[d]`` maps to
        ``d_d u_d`` at cell centres; ``pair_blocks[(d, e)] = (Dd_ue, De_ud)`` map
        to the edge staggered along both ``d`` and ``e``, together with the
        edge weights and the cell-to-edge averaging of the viscosity.
        """
        g = self.grid
        nd = g.ndim
        shape = g.shape
        h = g.h_axes
        emb = []
        for d in range(nd):
            a = g.axis_of(d)
            emb.append(_kron_all([_interior_embedding(shape[k]) if k == a else sp.identity(shape[k], format="csr")
                                  for k in range(nd)]))
        nblocks = [e.shape[1] for e in emb]

        def place(d, M):
            cols = []
            for e in range(nd):
                cols.append(M if e == d else sp.csr_matrix((M.shape[0], nblocks[e])))
            return sp.hstack(cols, format="csr")

        diag_blocks = []
        for d in range(nd):
            a = g.axis_of(d)
            D = _kron_all([_d_face_to_cell(shape[k], h[k]) if k == a else sp.identity(shape[k], format="csr")
                           for k in range(nd)])
            diag_blocks.append(place(d, D @ emb[d]))
        pair_blocks = {}
        for d in range(nd):
            for e in range(d + 1, nd):
                a, b = g.axis_of(d), g.axis_of(e)
                # d_e u_d : u_d is staggered on a, centred on b
                mats = []
                for k in range(nd):
                    if k == a:
                        mats.append(sp.identity(shape[k] + 1, format="csr"))
                    elif k == b:
                        mats.append(_d_cell_to_face_noslip(shape[k], h[k]))
                    else:
                        mats.append(sp.identity(shape[k], format="csr"))
                De_ud = place(d, _kron_all(mats) @ emb[d])
                mats = []
                for k in range(nd):
                    if k == b:
                        mats.append(sp.identity(shape[k] + 1, format="csr"))
                    elif k == a:
                        mats.append(_d_cell_to_face_noslip(shape[k], h[k]))
                    else:
                        mats.append(sp.identity(shape[k], format="csr"))
                Dd_ue = place(e, _kron_all(mats) @ emb[e])
                wts = []
                avg = []
                for k in range(nd):
                    if k in (a, b):
                        wts.append(_face_weights(shape[k]))
                        avg.append(_avg_cell_to_face_mirror(shape[k]))
                    else:
                        wts.append(np.ones(shape[k]))
                        avg.append(sp.identity(shape[k], format="csr"))
                w = wts[0]
                for x in wts[1:]:
                    w = np.multiply.outer(w, x)
                pair_blocks[(d, e)] = (Dd_ue, De_ud, self.V * w.ravel(), _kron_all(avg))
        return diag_blocks, pair_blocks

    @cached_property
    def _strain(self):
        """Stacked strain operator ``E`` (rows: diagonal strains, then shear strains)."""
        diag_blocks, pair_blocks = self._velocity_gradient_blocks
        rows = list(diag_blocks)
        for (d, e), (A, B, _, _) in pair_blocks.items():
            rows.append(0.5 * (A + B))
        E = sp.vstack(rows, format="csr")
        return E, E.T.tocsr(), E.multiply(E).T.tocsr()

    def strain_weights(self, nu_cells):
        """Quadrature weights times ``2 nu`` (diagonal) and ``4 nu`` (shear)."""
        diag_blocks, pair_blocks = self._velocity_gradient_blocks
        nu = np.asarray(nu_cells, dtype=float).ravel()
        parts = [2.0 * self.V * nu for _ in diag_blocks]
        for (_, _, w, avg) in pair_blocks.values():
            parts.append(4.0 * w * (avg @ nu))
        return np.concatenate(parts)

    def viscous_apply(self, u, nu_cells):
        """``-div(2 nu D u)`` on interior faces."""
        E, ET, _ = self._strain
        W = self.strain_weights(nu_cells)
        x = self.pack(u)
        return self.unpack(ET @ (W * (E @ x)) / self.V)

    def viscous_dissipation(self, u, nu_cells) -> float:
        """Discrete ``int 2 nu |D u|^2``."""
        E, _, _ = self._strain
        s = E @ self.pack(u)
        return float(np.sum(self.strain_weights(nu_cells) * s * s))

    def velocity_gradient_norm(self, u) -> float:
        """Discrete ``||grad u||`` over all component derivatives."""
        diag_blocks, pair_blocks = self._velocity_gradient_blocks
        x = self.pack(u)
        total = sum(self.V * np.sum((D @ x) ** 2) for D in diag_blocks)
        for (A, B, w, _) in pair_blocks.values():
            total += np.sum(w * (A @ x) ** 2) + np.sum(w * (B @ x) ** 2)
        return float(np.sqrt(total))

    def viscous_matrix(self, nu_cells):
        """Assembled ``-div(2 nu D .)`` on packed interior unknowns (tests and dense oracle checks)."""
        E, ET, _ = self._strain
        W = self.strain_weights(nu_cells)
        return (ET @ sp.diags(W) @ E / self.V).tocsr()

    def momentum_viscous_solve(self, rhs, nu_cells, dt, x0=None, method=None):
        """Solve ``(I - dt div(2 nu D .)) u = rhs`` with no-slip walls."""
        nu = np.asarray(nu_cells, dtype=float)
        if np.any(nu <= 0):
            raise ValueError("viscosity must be strictly positive")
        method = SolveMethod(method or self.linear.method)
        E, ET, E2T = self._strain
        W = self.strain_weights(nu)
        b = self.pack(rhs)
        c = dt / self.V
        if method is SolveMethod.DENSE:
            if b.size > DENSE_LIMIT:
                raise SolverError("DirectDense is limited to 65536 unknowns")
            A = np.eye(b.size) + c * (ET @ sp.diags(W) @ E).toarray()
            return self.unpack(np.linalg.solve(A, b))
        diag = 1.0 + c * (E2T @ W)
        mv = lambda x: x + c * (ET @ (W * (E @ x)))
        guess = None if x0 is None else self.pack(x0)
        x = pcg(mv, b, diag, self.linear.tol, self.linear.max_iter or 10 * b.size, x0=guess)
        return self.unpack(x)


@lru_cache(maxsize=32)
def operators_for(grid: Grid, linear: LinearSolveConfig | None = None) -> Operators:
    return Operators(grid, linear)
