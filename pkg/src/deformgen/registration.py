"""Geodesic-shooting registration.

Minimizes ``E(v0) = c * (L v0, v0) + lambda * SSD(S o phi_1, T)`` over the
initial velocity, where ``phi_1`` comes from shooting EPDiff and flowing the
resulting velocity path (``c = 1/2`` by default).  The gradient is the exact
derivative of the discrete forward scheme, accumulated in reverse.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .epdiff import (DEFAULT_STEPS, GeodesicPath, IntegratorKind, rhs_vjp,
                     shoot, shoot_array)
from .errors import ConfigError, DivergenceError, ShapeError, StallError
from .fields import ScalarField, VectorField
from .flow import (BilinearStencil, DeformationPath, det_jacobian_array,
                   flow_array, integrate_flow)
from .spectral import OperatorConfig, divide_symbol, metric_symbol, multiply_symbol

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "ssd",
    "energy",
    "energy_gradient",
    "register",
]

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_HALVINGS = 30


@dataclass(frozen=True)
class RegistrationConfig:
    lam: float = 1e4
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    steps: int = DEFAULT_STEPS
    integrator: IntegratorKind = IntegratorKind.EULER
    max_iters: int = 300
    step_size: float = 1e-2
    grad_tol: float = 1e-4
    energy_half_factor: bool = True
    # stop once an accepted step lowers E by less than this fraction
    energy_rtol: float = 1e-10
    # reject trial steps whose final deformation folds (min DetJac <= 0)
    fold_guard: bool = True

    def __post_init__(self):
        for name in ("lam", "step_size", "grad_tol", "energy_rtol"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ConfigError(f"{name} must be positive, got {val!r}")
        for name in ("steps", "max_iters"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")

    @property
    def reg_weight(self) -> float:
        return 0.5 if self.energy_half_factor else 1.0


@dataclass
class RegistrationResult:
    v0: VectorField
    path: GeodesicPath
    deformation: DeformationPath
    energy_history: list  # (iteration, total, data, reg)
    converged: bool
    min_detjac: float

    @property
    def iterations(self) -> int:
        return self.energy_history[-1][0]


def _check_pair(a, b):
    if a.grid != b.grid:
        raise ShapeError(f"grid mismatch: {a.grid} vs {b.grid}")


def ssd(a: ScalarField, b: ScalarField) -> float:
    """Sum of squared differences weighted by the cell area."""
    _check_pair(a, b)
    return float(np.sum((a.values - b.values) ** 2) * a.grid.cell_area)


class _Problem:
    """Array-level forward/adjoint evaluation for one (S, T, cfg) triple."""

    def __init__(self, S: ScalarField, T: ScalarField, cfg: RegistrationConfig):
        _check_pair(S, T)
        self.grid = S.grid
        self.S = S.values
        self.T = T.values
        self.cfg = cfg
        self.sym = metric_symbol(self.grid, cfg.operator)
        self.h = 1.0 / cfg.steps

    def forward(self, v0):
        cfg, g = self.cfg, self.grid
        V = shoot_array(v0, g, cfg.operator, cfg.steps, cfg.integrator)
        U = flow_array(V, g, self.h)
        last = BilinearStencil(g, U[-1])
        W = last.sample(self.S)
        data = cfg.lam * float(np.sum((W - self.T) ** 2)) * g.cell_area
        reg = cfg.reg_weight * float(np.sum(multiply_symbol(v0, self.sym) * v0)) * g.cell_area
        return data + reg, data, reg, (V, U, last, W)

    def gradient(self, v0, cache=None):
        """L2 gradient (partial derivatives divided by the cell area)."""
        if IntegratorKind(self.cfg.integrator) is not IntegratorKind.EULER:
            raise ConfigError("energy_gradient supports the Euler integrator only")
        if cache is None:
            cache = self.forward(v0)[3]
        V, U, last, W = cache
        g, cfg, h = self.grid, self.cfg, self.h
        area = g.cell_area
        N = cfg.steps

        wbar = 2.0 * cfg.lam * (W - self.T) * area
        ubar = wbar * last.gradient(self.S)
        vbar = np.zeros_like(V)
        for i in range(N - 1, -1, -1):
            st = BilinearStencil(g, U[i])
            for c in range(2):
                vbar[i, c] += h * st.scatter(ubar[c])
            if i > 0:
                G = st.gradient(V[i])  # G[d, c] = d(v_c o phi)/d x_d
                ubar = ubar + h * np.einsum("dc...,c...->d...", G, ubar)

        lam_v = vbar[N]
        for i in range(N - 1, -1, -1):
            lam_v = vbar[i] + lam_v + h * rhs_vjp(V[i], lam_v, g, cfg.operator)
        partial = lam_v + 2.0 * cfg.reg_weight * multiply_symbol(v0, self.sym) * area
        return partial / area


def energy(v0: VectorField, S: ScalarField, T: ScalarField,
           cfg: RegistrationConfig) -> tuple[float, float, float]:
    """Return ``(total, data, reg)``."""
    _check_pair(v0, S)
    total, data, reg, _ = _Problem(S, T, cfg).forward(v0.data)
    return total, data, reg


def energy_gradient(v0: VectorField, S: ScalarField, T: ScalarField,
                    cfg: RegistrationConfig) -> VectorField:
    """Gradient of :func:`energy` with respect to ``v0``.

    The returned field ``G`` satisfies ``dE = (G, dv0)`` for the
    area-weighted pairing of :func:`deformgen.fields.inner_product`, so the
    plain partial derivative with respect to sample ``k`` is
    ``G[k] * hx * hy``.
    """
    _check_pair(v0, S)
    return VectorField(v0.grid, _Problem(S, T, cfg).gradient(v0.data))


def _check_intensity(img, name):
    lo, hi = img.values.min(), img.values.max()
    if lo < 0.0 or hi > 1.0:
        raise ConfigError(f"{name} intensities must lie in [0, 1], got [{lo:.3g}, {hi:.3g}]")


def register(S: ScalarField, T: ScalarField, cfg: RegistrationConfig | None = None,
             v_init: VectorField | None = None) -> RegistrationResult:
    """Register ``S`` onto ``T`` by gradient descent on the initial velocity.

    The descent direction is the metric (Sobolev) gradient ``-K G`` and the
    step is chosen by backtracking until the Armijo condition holds.  The
    step found at one iteration, doubled, seeds the next search.  Iteration
    stops when ``|K G|`` drops below ``grad_tol`` or when an accepted step
    improves the energy by less than ``energy_rtol`` relative (bilinear
    resampling makes the energy only piecewise smooth, so the gradient need
    not vanish at a numerical minimum).

    With ``fold_guard`` set, a trial step is also rejected when the
    discrete ``phi_1`` folds.  Large velocities can make the forward-Euler
    particle flow fold even though the continuous flow cannot; the guard
    keeps every accepted iterate a valid deformation.

    Raises
    ------
    StallError
        When 30 halvings fail to decrease the energy.  The partial result is
        attached as ``err.result``.
    DivergenceError
        When shooting the initial guess blows up (``err.iteration`` is 0).
    """
    cfg = cfg or RegistrationConfig()
    _check_pair(S, T)
    _check_intensity(S, "source")
    _check_intensity(T, "target")
    prob = _Problem(S, T, cfg)
    g = S.grid
    area = g.cell_area
    v = np.zeros((2,) + g.shape) if v_init is None else v_init.data.copy()

    try:
        total, data, reg, cache = prob.forward(v)
    except DivergenceError as err:
        err.iteration = 0
        raise
    history = [(0, total, data, reg)]
    step = cfg.step_size
    converged = False
    it = 0
    while it < cfg.max_iters:
        G = prob.gradient(v, cache)
        d = -divide_symbol(G, prob.sym)
        gnorm = float(np.sqrt(np.sum(d * d) * area))
        if gnorm < cfg.grad_tol:
            converged = True
            break
        slope = float(np.sum(G * d) * area)
        if slope >= 0:
            converged = True
            break
        it += 1
        for _ in range(MAX_HALVINGS):
            trial = v + step * d
            try:
                t_total, t_data, t_reg, t_cache = prob.forward(trial)
            except DivergenceError:
                # an oversized trial step; accepted iterates never diverge
                step *= 0.5
                continue
            if (t_total <= total + ARMIJO_C * step * slope and t_total < total
                    and not (cfg.fold_guard and _folds(t_cache[1][-1], g))):
                break
            step *= 0.5
        else:
            err = StallError(f"line search stalled at iteration {it}")
            err.result = _result(v, g, cfg, history, False)
            raise err
        decrease = total - t_total
        v, total, data, reg, cache = trial, t_total, t_data, t_reg, t_cache
        history.append((it, total, data, reg))
        step *= 2.0
        log.debug("iter %d E=%.6g data=%.6g reg=%.6g |g|=%.3g", it, total, data, reg, gnorm)
        if decrease <= cfg.energy_rtol * abs(history[-2][1]):
            converged = True
            break
    return _result(v, g, cfg, history, converged)


def _folds(u, grid) -> bool:
    return bool(det_jacobian_array(u, grid).min() <= 0.0)


def _result(v, g, cfg, history, converged):
    v0 = VectorField(g, v)
    path = shoot(v0, cfg.operator, cfg.steps, cfg.integrator)
    deformation = integrate_flow(path)
    detj = det_jacobian_array(deformation.final.displacement.data, g)
    return RegistrationResult(v0, path, deformation, history, converged, float(detj.min()))
