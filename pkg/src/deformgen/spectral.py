"""Fourier-domain metric operators and periodic finite-difference stencils.

The metric operator is ``L = (-alpha * Lap + Id)**power`` where ``Lap`` is
the periodic 5-point Laplacian.  Its Fourier symbol is evaluated with the
discrete eigenvalues ``(2 - 2 cos(2 pi k / n)) / h**2`` so that the
Fourier-domain operator reproduces the spatial stencil exactly.

DFT convention: unnormalized forward, ``1/(nx*ny)`` on the inverse (numpy's
default).  Spectrum arrays are indexed ``[..., ky, kx]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .errors import ConfigError, ShapeError
from .fields import Grid, ScalarField, VectorField

__all__ = [
    "OperatorConfig",
    "Spectrum",
    "dft_forward",
    "dft_inverse",
    "laplacian_eigenvalues",
    "operator_symbol",
    "apply_L",
    "apply_K",
    "gradient",
    "divergence",
    "jacobian",
]


@dataclass(frozen=True)
class OperatorConfig:
    """Parameters of the metric operator ``(-alpha * Lap + Id)**power``."""

    alpha: float = 3.0
    power: int = 3

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha!r}")
        if int(self.power) != self.power or self.power < 1:
            raise ConfigError(f"power must be a positive integer, got {self.power!r}")


@dataclass(frozen=True)
class Spectrum:
    grid: Grid
    coeffs: np.ndarray  # complex, shape (..., ny, nx)


def dft_forward(f) -> Spectrum:
    """Unnormalized 2-D DFT of a scalar or vector field (per component)."""
    arr = f.data if isinstance(f, VectorField) else f.values
    return Spectrum(f.grid, np.fft.fft2(arr))


def dft_inverse(s: Spectrum):
    """Inverse of :func:`dft_forward`; the imaginary part is discarded."""
    if s.coeffs.shape[-2:] != s.grid.shape:
        raise ShapeError(f"spectrum shape {s.coeffs.shape} does not match {s.grid}")
    arr = np.fft.ifft2(s.coeffs).real
    if arr.ndim == 3:
        return VectorField(s.grid, arr)
    return ScalarField(s.grid, arr)


@lru_cache(maxsize=64)
def laplacian_eigenvalues(grid: Grid) -> np.ndarray:
    """Eigenvalues of ``-Lap`` (5-point, periodic) on the DFT modes; all >= 0."""
    kx = np.arange(grid.nx)
    ky = np.arange(grid.ny)
    lx = (2.0 - 2.0 * np.cos(2.0 * np.pi * kx / grid.nx)) / grid.hx**2
    ly = (2.0 - 2.0 * np.cos(2.0 * np.pi * ky / grid.ny)) / grid.hy**2
    lam = ly[:, None] + lx[None, :]
    lam.flags.writeable = False
    return lam


@lru_cache(maxsize=64)
def metric_symbol(grid: Grid, cfg: OperatorConfig) -> np.ndarray:
    sym = (cfg.alpha * laplacian_eigenvalues(grid) + 1.0) ** cfg.power
    sym.flags.writeable = False
    return sym


def operator_symbol(cfg: OperatorConfig, grid: Grid) -> ScalarField:
    """Per-frequency multiplier of ``L``, laid out like a spectrum."""
    return ScalarField(grid, metric_symbol(grid, cfg))


def multiply_symbol(arr, sym):
    """Multiply the spectrum of ``arr`` (last two axes) by a real, even symbol."""
    shape = sym.shape
    half = sym[:, : shape[1] // 2 + 1]
    return scipy.fft.irfft2(scipy.fft.rfft2(arr) * half, s=shape)


def divide_symbol(arr, sym):
    shape = sym.shape
    half = sym[:, : shape[1] // 2 + 1]
    return scipy.fft.irfft2(scipy.fft.rfft2(arr) / half, s=shape)


def apply_L(v, cfg: OperatorConfig):
    """Momentum ``m = L v`` for a scalar or vector field."""
    sym = metric_symbol(v.grid, cfg)
    if isinstance(v, VectorField):
        return VectorField(v.grid, multiply_symbol(v.data, sym))
    return ScalarField(v.grid, multiply_symbol(v.values, sym))


def apply_K(m, cfg: OperatorConfig):
    """Velocity ``v = K m`` with ``K`` the inverse of ``L``."""
    sym = metric_symbol(m.grid, cfg)
    if isinstance(m, VectorField):
        return VectorField(m.grid, divide_symbol(m.data, sym))
    return ScalarField(m.grid, divide_symbol(m.values, sym))


# Array-level stencils.  Axis -1 is x, axis -2 is y.

def ddx(a: np.ndarray, hx: float) -> np.ndarray:
    """``(a[ix+1] - a[ix-1]) / (2 hx)`` with periodic wrap."""
    out = np.empty_like(a)
    out[..., 1:-1] = a[..., 2:] - a[..., :-2]
    out[..., 0] = a[..., 1] - a[..., -1]
    out[..., -1] = a[..., 0] - a[..., -2]
    out /= 2.0 * hx
    return out


def ddy(a: np.ndarray, hy: float) -> np.ndarray:
    out = np.empty_like(a)
    out[..., 1:-1, :] = a[..., 2:, :] - a[..., :-2, :]
    out[..., 0, :] = a[..., 1, :] - a[..., -1, :]
    out[..., -1, :] = a[..., 0, :] - a[..., -2, :]
    out /= 2.0 * hy
    return out


def jacobian_array(v: np.ndarray, grid: Grid) -> np.ndarray:
    """``J[i, j] = d v_i / d x_j`` for ``v`` of shape ``(2, ny, nx)``."""
    out = np.empty((2, 2) + v.shape[1:])
    out[:, 0] = ddx(v, grid.hx)
    out[:, 1] = ddy(v, grid.hy)
    return out


def divergence_array(v: np.ndarray, grid: Grid) -> np.ndarray:
    return ddx(v[0], grid.hx) + ddy(v[1], grid.hy)


def gradient(s: ScalarField) -> VectorField:
    """Central-difference gradient with periodic wrap."""
    g = s.grid
    return VectorField(g, np.stack([ddx(s.values, g.hx), ddy(s.values, g.hy)]))


def divergence(v: VectorField) -> ScalarField:
    return ScalarField(v.grid, divergence_array(v.data, v.grid))


def jacobian(v: VectorField) -> tuple[ScalarField, ScalarField, ScalarField, ScalarField]:
    """``(dvx/dx, dvx/dy, dvy/dx, dvy/dy)`` by central differences."""
    J = jacobian_array(v.data, v.grid)
    g = v.grid
    return (ScalarField(g, J[0, 0]), ScalarField(g, J[0, 1]),
            ScalarField(g, J[1, 0]), ScalarField(g, J[1, 1]))
