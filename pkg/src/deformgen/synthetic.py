"""Synthetic growth sequences: soft-edged elliptical lobes that grow over time.

Each sequence has 1-3 lobes arranged around the image center.  Lobe radii
grow linearly, ``r_k = r0 * (1 + g * k)`` for frame ``k``, i.e. by ``g``
times the initial radius per frame, and each lobe drifts outward along its
axis as it grows.  The accompanying text reads
``"lobes: <k>; growth: <g> percent per step; direction: <angle> degrees"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fields import Grid, ScalarField

__all__ = ["GrowthSpec", "GeneratorConfig", "render", "random_spec", "generate"]


@dataclass(frozen=True)
class GrowthSpec:
    lobes: int
    growth: float  # fraction of the initial radius added per frame
    direction: float  # degrees
    radius: float = 0.06
    aspect: float = 0.6
    offset: float = 0.5  # lobe center distance in units of its radius
    edge: float = 0.04  # soft-edge width (torus lengths)

    def __post_init__(self):
        if self.lobes not in (1, 2, 3):
            raise ConfigError(f"lobes must be 1, 2 or 3, got {self.lobes}")
        if self.growth < 0 or self.radius <= 0 or not 0 < self.aspect <= 1 or self.edge <= 0:
            raise ConfigError("growth must be >= 0; radius, aspect and edge positive")

    @property
    def text(self) -> str:
        return (f"lobes: {self.lobes}; growth: {round(100 * self.growth)} percent per step; "
                f"direction: {round(self.direction) % 360} degrees")


@dataclass(frozen=True)
class GeneratorConfig:
    sequences: int = 64
    frames: int = 11
    growth_min: float = 0.05
    growth_max: float = 0.30
    seed: int = 0

    def __post_init__(self):
        if self.sequences < 1 or self.frames < 1:
            raise ConfigError("sequences and frames must be positive")
        if not 0 <= self.growth_min <= self.growth_max:
            raise ConfigError("need 0 <= growth_min <= growth_max")


def _periodic_offset(x, c):
    d = x - c
    return d - np.round(d)


def render(grid: Grid, spec: GrowthSpec, frame: int) -> ScalarField:
    """Frame ``frame`` of the sequence described by ``spec``."""
    X, Y = grid.coords()
    r = spec.radius * (1.0 + spec.growth * frame)
    theta0 = np.deg2rad(spec.direction)
    img = np.zeros(grid.shape)
    for j in range(spec.lobes):
        th = theta0 + 2.0 * np.pi * j / spec.lobes
        ux, uy = np.cos(th), np.sin(th)
        cx = 0.5 + spec.offset * r * ux
        cy = 0.5 + spec.offset * r * uy
        dx = _periodic_offset(X, cx)
        dy = _periodic_offset(Y, cy)
        along = dx * ux + dy * uy
        across = -dx * uy + dy * ux
        rho = np.hypot(along / r, across / (spec.aspect * r))
        # approximate signed distance to the ellipse boundary
        dist = (rho - 1.0) * spec.aspect * r
        img = np.maximum(img, 0.5 * (1.0 - np.tanh(dist / spec.edge)))
    return ScalarField(grid, img)


def random_spec(rng: np.random.Generator, cfg: GeneratorConfig) -> GrowthSpec:
    return GrowthSpec(
        lobes=int(rng.integers(1, 4)),
        growth=float(np.round(rng.uniform(cfg.growth_min, cfg.growth_max), 2)),
        direction=float(rng.integers(0, 360)),
    )


def generate(grid: Grid, cfg: GeneratorConfig):
    """Return a list of ``(frames, text, spec)`` tuples, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    out = []
    for _ in range(cfg.sequences):
        spec = random_spec(rng, cfg)
        frames = [render(grid, spec, k) for k in range(cfg.frames)]
        out.append((frames, spec.text, spec))
    return out
