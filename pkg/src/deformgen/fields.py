"""Grid-sampled fields on the periodic unit square.

Arrays are stored with shape ``(ny, nx)`` (scalars) or ``(2, ny, nx)``
(vectors), so that a C-order ravel is row-major with x varying fastest.
Sample ``[iy, ix]`` sits at the point ``(ix * hx, iy * hy)``.  Fields are
immutable; every operation returns a new field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "Grid",
    "ScalarField",
    "VectorField",
    "DeformationField",
    "field_axpy",
    "inner_product",
    "linf_error",
]


@dataclass(frozen=True)
class Grid:
    """Uniform sampling of the unit torus with ``nx * ny`` points."""

    nx: int
    ny: int

    def __post_init__(self):
        for name in ("nx", "ny"):
            n = getattr(self, name)
            if int(n) != n or n < 4 or n % 2:
                raise ConfigError(f"grid {name}={n!r} must be an even integer >= 4")

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Sample coordinates ``(X, Y)``, each of shape ``(ny, nx)``."""
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        return np.meshgrid(x, y, indexing="xy")


def _frozen(values, shape, what):
    arr = np.array(values, dtype=float)
    if arr.shape != shape:
        raise ShapeError(f"{what} expects shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    arr.flags.writeable = False
    return arr


class ScalarField:
    """A real image sampled on a :class:`Grid`."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values):
        self.grid = grid
        self.values = _frozen(values, grid.shape, "ScalarField")

    @classmethod
    def zeros(cls, grid: Grid) -> ScalarField:
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: Grid, c: float) -> ScalarField:
        return cls(grid, np.full(grid.shape, float(c)))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> ScalarField:
        return cls(grid, fn(*grid.coords()))

    def __repr__(self):
        return f"ScalarField({self.grid.nx}x{self.grid.ny})"


class VectorField:
    """A 2-component field; ``data[0]`` is the x-component, ``data[1]`` the y-component."""

    __slots__ = ("grid", "data")

    def __init__(self, grid: Grid, data):
        self.grid = grid
        self.data = _frozen(data, (2,) + grid.shape, "VectorField")

    @classmethod
    def zeros(cls, grid: Grid) -> VectorField:
        return cls(grid, np.zeros((2,) + grid.shape))

    @classmethod
    def constant(cls, grid: Grid, cx: float, cy: float) -> VectorField:
        data = np.empty((2,) + grid.shape)
        data[0], data[1] = cx, cy
        return cls(grid, data)

    @classmethod
    def from_function(cls, grid: Grid, fn) -> VectorField:
        """Build from ``fn(X, Y) -> (vx, vy)`` evaluated at the sample points."""
        vx, vy = fn(*grid.coords())
        return cls(grid, np.stack(np.broadcast_arrays(vx, vy)))

    @property
    def x(self) -> np.ndarray:
        return self.data[0]

    @property
    def y(self) -> np.ndarray:
        return self.data[1]

    def __repr__(self):
        return f"VectorField({self.grid.nx}x{self.grid.ny})"


class DeformationField:
    """The map ``phi(x) = x + u(x)`` stored through its displacement ``u``.

    The displacement is unwrapped: it may exceed the torus side length, and
    every consumer reduces sample positions modulo 1.
    """

    __slots__ = ("displacement",)

    def __init__(self, displacement: VectorField):
        self.displacement = displacement

    @property
    def grid(self) -> Grid:
        return self.displacement.grid

    @classmethod
    def identity(cls, grid: Grid) -> DeformationField:
        return cls(VectorField.zeros(grid))

    def __repr__(self):
        return f"DeformationField({self.grid.nx}x{self.grid.ny})"


def _check_grids(a, b):
    if a.grid != b.grid:
        raise ShapeError(f"grid mismatch: {a.grid} vs {b.grid}")


def _array(f):
    return f.data if isinstance(f, VectorField) else f.values


def field_axpy(a: float, x: VectorField, y: VectorField) -> VectorField:
    """Return ``a * x + y``."""
    _check_grids(x, y)
    return VectorField(x.grid, a * x.data + y.data)


def inner_product(a, b) -> float:
    """Quadrature-weighted pairing ``sum(a * b) * hx * hy``.

    Works on two scalar fields or two vector fields.
    """
    _check_grids(a, b)
    if type(a) is not type(b):
        raise ShapeError("inner_product needs two fields of the same kind")
    return float(np.sum(_array(a) * _array(b)) * a.grid.cell_area)


def linf_error(a, b) -> float:
    """Largest absolute difference over all samples and components."""
    _check_grids(a, b)
    return float(np.max(np.abs(_array(a) - _array(b))))
