"""Shared test-field builders."""

import numpy as np

from deformgen.fields import Grid, ScalarField, VectorField
from deformgen.spectral import OperatorConfig, apply_K


def smooth_vector(grid: Grid, rng, alpha: float = 3.0, peak: float = 0.2) -> VectorField:
    """A random smooth velocity ``K m`` with white-noise momentum, scaled to ``peak``."""
    m = VectorField(grid, rng.standard_normal((2,) + grid.shape))
    v = apply_K(m, OperatorConfig(alpha)).data
    return VectorField(grid, v * (peak / np.abs(v).max()))


def smooth_image(grid: Grid, rng, modes: int = 2) -> ScalarField:
    """A random low-frequency image with values in [0.1, 0.9]."""
    X, Y = grid.coords()
    f = np.zeros(grid.shape)
    for kx in range(-modes, modes + 1):
        for ky in range(-modes, modes + 1):
            a, p = rng.standard_normal(), rng.uniform(0, 2 * np.pi)
            f += a * np.cos(2 * np.pi * (kx * X + ky * Y) + p)
    f = (f - f.min()) / (f.max() - f.min())
    return ScalarField(grid, 0.1 + 0.8 * f)


def gaussian_blob(grid: Grid, cx: float, cy: float, sigma: float = 0.1) -> ScalarField:
    X, Y = grid.coords()
    dx = (X - cx + 0.5) % 1.0 - 0.5
    dy = (Y - cy + 0.5) % 1.0 - 0.5
    return ScalarField(grid, np.exp(-(dx**2 + dy**2) / (2 * sigma**2)))


def disk(grid: Grid, radius: float, edge: float = 0.03) -> ScalarField:
    X, Y = grid.coords()
    r = np.hypot(X - 0.5, Y - 0.5)
    return ScalarField(grid, 0.5 * (1 - np.tanh((r - radius) / edge)))


# acceptance outcomes, keyed by criterion number and printed at the end of the run
ACCEPTANCE = {}


def report(number: int, title: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} | {title} | {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line
