"""Structured box grids, cell-centred scalar fields and MAC velocity fields.

Arrays are stored row-major with index order ``(y, x)`` in 2D and
``(z, y, x)`` in 3D.  Grid dimensions and lengths are given in spatial order
``(x, y[, z])``, so spatial axis ``d`` lives on array axis ``ndim - 1 - d``.

The velocity component along spatial axis ``d`` is face-centred: its array
has one extra entry along array axis ``ndim - 1 - d``.  The first and last
entries along that axis are the boundary faces, where the no-slip condition
forces the normal component to vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid on ``[0, Lx] x [0, Ly] (x [0, Lz])``."""

    dims: tuple[int, ...]
    lengths: tuple[float, ...]

    def __post_init__(self):
        if len(self.dims) not in (2, 3) or len(self.lengths) != len(self.dims):
            raise GridError("grid must be 2D or 3D with one length per axis")
        if any(int(n) < 4 for n in self.dims):
            raise GridError(f"grid too small: dims {self.dims}, need >= 4 cells per axis")
        if any(not np.isfinite(L) or L <= 0 for L in self.lengths):
            raise GridError(f"grid lengths must be positive, got {self.lengths}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "lengths", tuple(float(L) for L in self.lengths))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def spacing(self) -> tuple[float, ...]:
        """Cell sizes in spatial order."""
        return tuple(L / n for L, n in zip(self.lengths, self.dims))

    @property
    def shape(self) -> tuple[int, ...]:
        """Array shape of a cell-centred field."""
        return tuple(reversed(self.dims))

    @property
    def h_axes(self) -> tuple[float, ...]:
        """Cell sizes in array-axis order."""
        return tuple(reversed(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def axis_of(self, d: int) -> int:
        """Array axis carrying spatial direction ``d``."""
        return self.ndim - 1 - d

    def face_shape(self, d: int) -> tuple[int, ...]:
        shape = list(self.shape)
        shape[self.axis_of(d)] += 1
        return tuple(shape)

    def cell_centers(self) -> tuple[np.ndarray, ...]:
        """Broadcastable coordinate arrays ``(x, y[, z])`` of the cell centres."""
        coords = []
        for d, (n, h) in enumerate(zip(self.dims, self.spacing)):
            c = (np.arange(n) + 0.5) * h
            shape = [1] * self.ndim
            shape[self.axis_of(d)] = n
            coords.append(c.reshape(shape))
        return tuple(coords)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values) * self.cell_volume)

    def mean(self, values: np.ndarray) -> float:
        return float(np.mean(values))


def make_grid(dims: Sequence[int], lengths: Sequence[float]) -> Grid:
    return Grid(tuple(dims), tuple(lengths))


@dataclass
class ScalarField:
    """Cell-centred scalar with homogeneous Neumann boundary condition."""

    grid: Grid
    values: np.ndarray
    bc: str = "NeumannZero"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise GridError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("scalar field contains non-finite values")

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(c)))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy(), self.bc)

    def __add__(self, other: "ScalarField") -> "ScalarField":
        _check_same_grid(self.grid, other.grid)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        _check_same_grid(self.grid, other.grid)
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, a: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * float(a))

    __rmul__ = __mul__


@dataclass
class VectorField:
    """MAC velocity field with no-slip walls.

    ``components[d]`` is the velocity along spatial direction ``d``.  Normal
    components on boundary faces are zeroed on construction.
    """

    grid: Grid
    components: tuple[np.ndarray, ...] = field(default=())
    bc: str = "NoSlip"

    def __post_init__(self):
        g = self.grid
        if not self.components:
            self.components = tuple(np.zeros(g.face_shape(d)) for d in range(g.ndim))
        comps = []
        for d, c in enumerate(self.components):
            c = np.array(c, dtype=float)
            if c.shape != g.face_shape(d):
                raise GridError(f"component {d} has shape {c.shape}, expected {g.face_shape(d)}")
            if not np.all(np.isfinite(c)):
                raise GridError("velocity field contains non-finite values")
            zero_normal_faces(c, g.axis_of(d))
            comps.append(c)
        if len(comps) != g.ndim:
            raise GridError("one velocity component per spatial dimension required")
        self.components = tuple(comps)

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid)

    def copy(self) -> "VectorField":
        return VectorField(self.grid, tuple(c.copy() for c in self.components), self.bc)

    def __add__(self, other: "VectorField") -> "VectorField":
        _check_same_grid(self.grid, other.grid)
        return VectorField(self.grid, tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "VectorField") -> "VectorField":
        _check_same_grid(self.grid, other.grid)
        return VectorField(self.grid, tuple(a - b for a, b in zip(self.components, other.components)))

    def __mul__(self, a: float) -> "VectorField":
        return VectorField(self.grid, tuple(c * float(a) for c in self.components))

    __rmul__ = __mul__


def zero_normal_faces(component: np.ndarray, axis: int) -> None:
    idx = [slice(None)] * component.ndim
    idx[axis] = 0
    component[tuple(idx)] = 0.0
    idx[axis] = -1
    component[tuple(idx)] = 0.0


def _check_same_grid(a: Grid, b: Grid) -> None:
    if a != b:
        raise GridError("fields live on different grids")


def integrate(f: ScalarField) -> float:
    """Midpoint-rule integral over the box."""
    return f.grid.integrate(f.values)


def mean(f: ScalarField) -> float:
    return integrate(f) / f.grid.volume
