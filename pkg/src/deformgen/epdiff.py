"""Geodesic shooting: forward integration of the EPDiff equation.

    dv/dt = -K[(Dv)^T m + (Dm) v + m div v],   m = L v

Time runs over ``[0, duration]`` (default 1) with a fixed step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, NumericError
from .fields import Grid, VectorField, inner_product
from .spectral import (OperatorConfig, divide_symbol, metric_symbol,
                       multiply_symbol, apply_L, ddx, ddy, jacobian_array)

__all__ = [
    "IntegratorKind",
    "GeodesicPath",
    "epdiff_rhs",
    "shoot",
    "kinetic_energy",
    "BLOWUP_LIMIT",
    "DEFAULT_STEPS",
]

BLOWUP_LIMIT = 1e6
DEFAULT_STEPS = 10


class IntegratorKind(enum.Enum):
    EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True)
class GeodesicPath:
    """Velocities ``v_0 ... v_N`` sampled at ``t_i = i * duration / N``."""

    velocities: tuple
    operator: OperatorConfig
    duration: float = 1.0
    kind: IntegratorKind = field(default=IntegratorKind.EULER)

    @property
    def steps(self) -> int:
        return len(self.velocities) - 1

    @property
    def h(self) -> float:
        return self.duration / self.steps

    @property
    def grid(self) -> Grid:
        return self.velocities[0].grid

    def as_array(self) -> np.ndarray:
        """Stacked velocities, shape ``(N + 1, 2, ny, nx)``."""
        return np.stack([v.data for v in self.velocities])


def _rhs_terms(v, m, grid):
    Dv = jacobian_array(v, grid)
    # (Dv)^T m : component j is sum_i dv_i/dx_j * m_i
    t1 = np.einsum("ij...,i...->j...", Dv, m)
    # (Dm) v + m div v, evaluated jointly as sum_j D_j(m_i v_j).  Together
    # with t1 this is the exact transpose of the discrete Lie bracket, so
    # (v, t1 + t2) vanishes identically and (L v, v) is conserved.
    t2 = ddx(m * v[0], grid.hx) + ddy(m * v[1], grid.hy)
    return t1, t2


def rhs_array(v: np.ndarray, grid: Grid, cfg: OperatorConfig) -> np.ndarray:
    sym = metric_symbol(grid, cfg)
    m = multiply_symbol(v, sym)
    t1, t2 = _rhs_terms(v, m, grid)
    for name, term in (("(Dv)^T m", t1), ("(Dm) v + m div v", t2)):
        if not np.all(np.isfinite(term)):
            raise NumericError(f"non-finite values in EPDiff term {name}")
    return -divide_symbol(t1 + t2, sym)


def rhs_vjp(v: np.ndarray, a: np.ndarray, grid: Grid, cfg: OperatorConfig) -> np.ndarray:
    """Transpose-Jacobian product ``(d rhs / d v)^T a`` under the plain sum pairing."""
    sym = metric_symbol(grid, cfg)
    hx, hy = grid.hx, grid.hy
    m = multiply_symbol(v, sym)
    # cotangent of N = t1 + t2 (K is symmetric)
    c = -divide_symbol(a, sym)
    Dv = jacobian_array(v, grid)
    Dc = jacobian_array(c, grid)
    d = (ddx, ddy)
    h = (hx, hy)

    vbar = np.zeros_like(v)
    mbar = np.zeros_like(m)
    # t1_j = sum_i D_j(v_i) m_i, with D_j^T = -D_j
    for i in range(2):
        for j in range(2):
            vbar[i] -= d[j](c[j] * m[i], h[j])
            mbar[i] += c[j] * Dv[i, j]
    # t2_i = sum_j D_j(m_i v_j)
    for i in range(2):
        for j in range(2):
            mbar[i] -= Dc[i, j] * v[j]
            vbar[j] -= Dc[i, j] * m[i]
    return vbar + multiply_symbol(mbar, sym)


def epdiff_rhs(v: VectorField, cfg: OperatorConfig) -> VectorField:
    """Time derivative of the velocity under EPDiff."""
    return VectorField(v.grid, rhs_array(v.data, v.grid, cfg))


def _check(v, i):
    peak = np.max(np.abs(v))
    if not np.isfinite(peak) or peak > BLOWUP_LIMIT:
        raise DivergenceError(f"EPDiff shooting diverged at step {i} (|v|max={peak:.3g})", step=i)


def shoot_array(v0: np.ndarray, grid: Grid, cfg: OperatorConfig, steps: int,
                kind: IntegratorKind = IntegratorKind.EULER,
                duration: float = 1.0) -> np.ndarray:
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    kind = IntegratorKind(kind)
    h = duration / steps
    out = np.empty((steps + 1,) + v0.shape)
    out[0] = v0
    v = v0
    for i in range(steps):
        if kind is IntegratorKind.EULER:
            v = v + h * rhs_array(v, grid, cfg)
        else:
            k1 = rhs_array(v, grid, cfg)
            k2 = rhs_array(v + 0.5 * h * k1, grid, cfg)
            k3 = rhs_array(v + 0.5 * h * k2, grid, cfg)
            k4 = rhs_array(v + h * k3, grid, cfg)
            v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check(v, i + 1)
        out[i + 1] = v
    return out


def shoot(v0: VectorField, cfg: OperatorConfig, steps: int = DEFAULT_STEPS,
          kind: IntegratorKind = IntegratorKind.EULER,
          duration: float = 1.0) -> GeodesicPath:
    """Integrate EPDiff from ``v0`` with ``steps`` fixed steps.

    Raises
    ------
    DivergenceError
        If ``max |v|`` exceeds ``BLOWUP_LIMIT``; ``err.step`` is the step index.
    """
    arr = shoot_array(v0.data, v0.grid, cfg, steps, kind, duration)
    vels = (v0,) + tuple(VectorField(v0.grid, a) for a in arr[1:])
    return GeodesicPath(vels, cfg, float(duration), IntegratorKind(kind))


def kinetic_energy(v: VectorField, cfg: OperatorConfig) -> float:
    """``(L v, v)``, the squared norm of ``v`` in the metric."""
    return inner_product(apply_L(v, cfg), v)
