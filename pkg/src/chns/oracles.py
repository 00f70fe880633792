"""Loop-assembled dense reference operators.

These are written cell by cell from the stencil definitions and share no
code with :mod:`chns.operators`; they exist to cross-check it on small grids.
"""

from __future__ import annotations

import itertools

import numpy as np

from .grid import Grid


def _cells(grid: Grid):
    return itertools.product(*(range(n) for n in grid.shape))


def _flat(shape, idx):
    return int(np.ravel_multi_index(idx, shape))


def dense_laplacian(grid: Grid) -> np.ndarray:
    """Neumann Laplacian with mirrored ghost cells."""
    shape = grid.shape
    N = grid.size
    L = np.zeros((N, N))
    for c in _cells(grid):
        i = _flat(shape, c)
        for a, h in enumerate(grid.h_axes):
            for s in (-1, 1):
                nb = list(c)
                nb[a] += s
                if 0 <= nb[a] < shape[a]:
                    j = _flat(shape, tuple(nb))
                    L[i, j] += 1.0 / h ** 2
                    L[i, i] -= 1.0 / h ** 2
                # mirrored ghost: zero flux, no contribution
    return L


def dense_inv_neumann(grid: Grid) -> np.ndarray:
    return np.linalg.pinv(-dense_laplacian(grid))


def _face_index(grid: Grid):
    """Map (d, full face index) of every face to a row of the stacked face vector."""
    rows = {}
    k = 0
    for d in range(grid.ndim):
        for idx in itertools.product(*(range(n) for n in grid.face_shape(d))):
            rows[(d, idx)] = k
            k += 1
    return rows, k


def dense_gradient_divergence(grid: Grid):
    """Gradient (faces x cells, zero on boundary faces) and divergence (cells x faces)."""
    rows, nf = _face_index(grid)
    shape = grid.shape
    G = np.zeros((nf, grid.size))
    D = np.zeros((grid.size, nf))
    for (d, idx), r in rows.items():
        a = grid.axis_of(d)
        h = grid.h_axes[a]
        i = idx[a]
        if 0 < i < shape[a]:
            lo = list(idx)
            lo[a] = i - 1
            G[r, _flat(shape, tuple(idx))] += 1.0 / h
            G[r, _flat(shape, tuple(lo))] -= 1.0 / h
    for c in _cells(grid):
        ci = _flat(shape, c)
        for d in range(grid.ndim):
            a = grid.axis_of(d)
            h = grid.h_axes[a]
            hi = list(c)
            hi[a] += 1
            D[ci, rows[(d, tuple(hi))]] += 1.0 / h
            D[ci, rows[(d, tuple(c))]] -= 1.0 / h
    return G, D


def stack_faces(u) -> np.ndarray:
    return np.concatenate([c.ravel() for c in u])


def unstack_faces(grid: Grid, x):
    out = []
    off = 0
    for d in range(grid.ndim):
        s = grid.face_shape(d)
        n = int(np.prod(s))
        out.append(x[off:off + n].reshape(s))
        off += n
    return tuple(out)


def dense_leray(grid: Grid) -> np.ndarray:
    """Projection ``I - G (D G)^+ D`` on the stacked face vector."""
    G, D = dense_gradient_divergence(grid)
    L = D @ G
    return np.eye(G.shape[0]) - G @ np.linalg.pinv(L) @ D


def _interior_unknowns(grid: Grid):
    """Packed numbering of interior faces, component by component, row-major."""
    index = {}
    k = 0
    for d in range(grid.ndim):
        a = grid.axis_of(d)
        for idx in itertools.product(*(range(n) for n in grid.face_shape(d))):
            if 0 < idx[a] < grid.shape[a]:
                index[(d, idx)] = k
                k += 1
    return index, k


def dense_viscous(grid: Grid, nu: np.ndarray) -> np.ndarray:
    """``-div(2 nu D u)`` in flux form on interior faces, no-slip ghosts on walls."""
    index, n_unk = _interior_unknowns(grid)
    shape = grid.shape
    nd = grid.ndim
    h = grid.h_axes

    def u_form(d, idx):
        return {index[(d, idx)]: 1.0} if (d, idx) in index else {}

    def add(acc, form, s):
        for k, v in form.items():
            acc[k] = acc.get(k, 0.0) + s * v

    def nu_edge(edge, a, b):
        vals = []
        for ia in (edge[a] - 1, edge[a]):
            for ib in (edge[b] - 1, edge[b]):
                c = list(edge)
                c[a] = min(max(ia, 0), shape[a] - 1)
                c[b] = min(max(ib, 0), shape[b] - 1)
                vals.append(nu[tuple(c)])
        return float(np.mean(vals))

    def tangential_derivative(d, b, edge):
        """d/dx_b of u_d at an edge position (index along b is a node index)."""
        j = edge[b]
        n = shape[b]
        form = {}
        lo = list(edge)
        hi = list(edge)
        if j == 0:
            hi[b] = 0
            add(form, u_form(d, tuple(hi)), 2.0 / h[b])
        elif j == n:
            lo[b] = n - 1
            add(form, u_form(d, tuple(lo)), -2.0 / h[b])
        else:
            hi[b] = j
            lo[b] = j - 1
            add(form, u_form(d, tuple(hi)), 1.0 / h[b])
            add(form, u_form(d, tuple(lo)), -1.0 / h[b])
        return form

    def tau_normal(d, cell):
        a = grid.axis_of(d)
        hi = list(cell)
        hi[a] += 1
        form = {}
        add(form, u_form(d, tuple(hi)), 2.0 * nu[cell] / h[a])
        add(form, u_form(d, tuple(cell)), -2.0 * nu[cell] / h[a])
        return form

    def tau_shear(d, e, edge):
        a, b = grid.axis_of(d), grid.axis_of(e)
        form = {}
        add(form, tangential_derivative(d, b, edge), 1.0)
        add(form, tangential_derivative(e, a, edge), 1.0)
        w = nu_edge(edge, a, b)
        return {k: w * v for k, v in form.items()}

    K = np.zeros((n_unk, n_unk))
    for (d, idx), row in index.items():
        a = grid.axis_of(d)
        acc = {}
        hi = tuple(idx)
        lo = list(idx)
        lo[a] -= 1
        add(acc, tau_normal(d, hi), 1.0 / h[a])
        add(acc, tau_normal(d, tuple(lo)), -1.0 / h[a])
        for e in range(nd):
            if e == d:
                continue
            b = grid.axis_of(e)
            up = list(idx)
            up[b] += 1
            add(acc, tau_shear(d, e, tuple(up)), 1.0 / h[b])
            add(acc, tau_shear(d, e, tuple(idx)), -1.0 / h[b])
        for k, v in acc.items():
            K[row, k] -= v
    return K
