"""Deformations from velocity paths, image warping and Jacobian determinants."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .epdiff import GeodesicPath
from .errors import NumericError, ShapeError
from .fields import DeformationField, Grid, ScalarField, VectorField
from .spectral import ddx, ddy

__all__ = [
    "DeformationPath",
    "sample_bilinear",
    "integrate_flow",
    "warp",
    "det_jacobian",
]


@dataclass(frozen=True)
class DeformationPath:
    deformations: tuple

    @property
    def final(self) -> DeformationField:
        return self.deformations[-1]

    def as_array(self) -> np.ndarray:
        """Stacked displacements, shape ``(N + 1, 2, ny, nx)``."""
        return np.stack([d.displacement.data for d in self.deformations])


@lru_cache(maxsize=16)
def _sample_indices(grid: Grid):
    iy, ix = np.indices(grid.shape, dtype=float)
    iy.flags.writeable = False
    ix.flags.writeable = False
    return iy, ix


class BilinearStencil:
    """Corner indices and weights for sampling at ``x + u(x)`` on the torus.

    Sample positions are measured in grid cells; the cell is found with
    ``floor`` so that an on-grid position gets weight exactly 1 on its own
    sample.
    """

    def __init__(self, grid: Grid, u: np.ndarray):
        if not np.all(np.isfinite(u)):
            raise NumericError("non-finite sample coordinates")
        ny, nx = grid.shape
        iy, ix = _sample_indices(grid)
        px = ix + u[0] / grid.hx
        py = iy + u[1] / grid.hy
        fx = np.floor(px)
        fy = np.floor(py)
        self.wx = px - fx
        self.wy = py - fy
        self.x0 = fx.astype(np.int64) % nx
        self.y0 = fy.astype(np.int64) % ny
        self.x1 = (self.x0 + 1) % nx
        self.y1 = (self.y0 + 1) % ny
        self.grid = grid

    def sample(self, f: np.ndarray) -> np.ndarray:
        wx, wy = self.wx, self.wy
        f00 = f[..., self.y0, self.x0]
        f01 = f[..., self.y0, self.x1]
        f10 = f[..., self.y1, self.x0]
        f11 = f[..., self.y1, self.x1]
        return ((1 - wx) * (1 - wy) * f00 + wx * (1 - wy) * f01
                + (1 - wx) * wy * f10 + wx * wy * f11)

    def gradient(self, f: np.ndarray) -> np.ndarray:
        """Derivative of the interpolant with respect to the sample position.

        Returns shape ``(2,) + f.shape``: the x- and y-derivatives.
        """
        wx, wy = self.wx, self.wy
        f00 = f[..., self.y0, self.x0]
        f01 = f[..., self.y0, self.x1]
        f10 = f[..., self.y1, self.x0]
        f11 = f[..., self.y1, self.x1]
        gx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) / self.grid.hx
        gy = ((1 - wx) * (f10 - f00) + wx * (f11 - f01)) / self.grid.hy
        return np.stack([gx, gy])

    def scatter(self, g: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`sample` for a scalar array ``g`` of shape ``(ny, nx)``."""
        ny, nx = self.grid.shape
        wx, wy = self.wx, self.wy
        idx = np.concatenate([(self.y0 * nx + self.x0).ravel(),
                              (self.y0 * nx + self.x1).ravel(),
                              (self.y1 * nx + self.x0).ravel(),
                              (self.y1 * nx + self.x1).ravel()])
        w = np.concatenate([((1 - wx) * (1 - wy) * g).ravel(),
                            (wx * (1 - wy) * g).ravel(),
                            ((1 - wx) * wy * g).ravel(),
                            (wx * wy * g).ravel()])
        return np.bincount(idx, weights=w, minlength=nx * ny).reshape(ny, nx)


def sample_bilinear(f, points: DeformationField):
    """Evaluate ``f`` at ``phi(x)`` for every sample ``x`` (periodic bilinear)."""
    if f.grid != points.grid:
        raise ShapeError("field and deformation live on different grids")
    st = BilinearStencil(points.grid, points.displacement.data)
    if isinstance(f, VectorField):
        return VectorField(f.grid, st.sample(f.data))
    return ScalarField(f.grid, st.sample(f.values))


def flow_array(velocities: np.ndarray, grid: Grid, h: float) -> np.ndarray:
    """Forward-Euler particle flow; returns displacements ``(N + 1, 2, ny, nx)``."""
    u = np.zeros_like(velocities)
    for i in range(velocities.shape[0] - 1):
        st = BilinearStencil(grid, u[i])
        u[i + 1] = u[i] + h * st.sample(velocities[i])
    return u


def integrate_flow(path: GeodesicPath) -> DeformationPath:
    """Integrate ``d phi/dt = v_t(phi_t)`` from the identity along ``path``."""
    g = path.grid
    u = flow_array(path.as_array(), g, path.h)
    return DeformationPath(tuple(DeformationField(VectorField(g, a)) for a in u))


def warp(image: ScalarField, phi: DeformationField) -> ScalarField:
    """The deformed image ``image o phi``."""
    return sample_bilinear(image, phi)


def det_jacobian_array(u: np.ndarray, grid: Grid) -> np.ndarray:
    a = 1.0 + ddx(u[0], grid.hx)
    b = ddy(u[0], grid.hy)
    c = ddx(u[1], grid.hx)
    d = 1.0 + ddy(u[1], grid.hy)
    return a * d - b * c


def det_jacobian(phi: DeformationField) -> ScalarField:
    """Per-sample ``det(I + Du)``; values <= 0 flag folding."""
    return ScalarField(phi.grid, det_jacobian_array(phi.displacement.data, phi.grid))
