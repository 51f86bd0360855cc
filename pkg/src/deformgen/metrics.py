"""Evaluation metrics: SSIM, Jacobian-determinant statistics, ensemble bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError, ShapeError
from .fields import DeformationField, ScalarField
from .flow import det_jacobian_array
from .latent import geodesic_mae_curve

__all__ = [
    "ConfidenceMaps",
    "DetJacStats",
    "ssim",
    "detjac_stats",
    "confidence_maps",
    "coverage",
    "velocity_mae_curve",
]

velocity_mae_curve = geodesic_mae_curve

SSIM_WINDOW = 8
_C1 = (0.01 * 1.0) ** 2
_C2 = (0.03 * 1.0) ** 2


def _check_unit(f: ScalarField, name: str):
    v = f.values
    if v.min() < 0.0 or v.max() > 1.0:
        raise ConfigError(f"{name} intensities must lie in [0, 1]")


def ssim(a: ScalarField, b: ScalarField, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` windows (stride 1, periodic wrap).

    Window statistics use uniform weights and population (1/n) moments.
    """
    if a.grid != b.grid:
        raise ShapeError(f"grid mismatch: {a.grid} vs {b.grid}")
    _check_unit(a, "first image")
    _check_unit(b, "second image")

    def box(x):
        return uniform_filter(x, size=window, mode="wrap")

    x, y = a.values, b.values
    mx, my = box(x), box(y)
    vx = box(x * x) - mx * mx
    vy = box(y * y) - my * my
    cxy = box(x * y) - mx * my
    num = (2.0 * mx * my + _C1) * (2.0 * cxy + _C2)
    den = (mx * mx + my * my + _C1) * (vx + vy + _C2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class DetJacStats:
    min: float
    mean: float
    negative_fraction: float


def detjac_stats(phi: DeformationField) -> DetJacStats:
    d = det_jacobian_array(phi.displacement.data, phi.grid)
    return DetJacStats(float(d.min()), float(d.mean()), float(np.mean(d < 0)))


@dataclass(frozen=True)
class ConfidenceMaps:
    mean: ScalarField
    lower: ScalarField
    upper: ScalarField
    ci_width: ScalarField
    sample_count: int


def confidence_maps(samples) -> ConfidenceMaps:
    """Pixel-wise mean and ``mean -/+ 2 std`` (unbiased std) over an ensemble."""
    samples = list(samples)
    if len(samples) < 2:
        raise ConfigError(f"need at least 2 samples, got {len(samples)}")
    grid = samples[0].grid
    if any(s.grid != grid for s in samples):
        raise ShapeError("samples live on different grids")
    # moments of the deviations from the first sample: identical samples
    # give exactly zero spread, and the sums stay well conditioned
    ref = samples[0].values
    dev = np.stack([s.values - ref for s in samples])
    shift = dev.mean(axis=0)
    mean = ref + shift
    std = np.sqrt(np.sum((dev - shift) ** 2, axis=0) / (len(samples) - 1))
    lower, upper = mean - 2.0 * std, mean + 2.0 * std
    return ConfidenceMaps(ScalarField(grid, mean), ScalarField(grid, lower),
                          ScalarField(grid, upper), ScalarField(grid, upper - lower), len(samples))


def coverage(maps: ConfidenceMaps, draws) -> float:
    """Fraction of per-pixel values in ``draws`` lying inside ``[lower, upper]``."""
    stack = np.stack([d.values if isinstance(d, ScalarField) else np.asarray(d) for d in draws])
    inside = (stack >= maps.lower.values) & (stack <= maps.upper.values)
    return float(inside.mean())
