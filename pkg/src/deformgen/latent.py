"""Bandlimited Fourier codec for velocity fields and latent geodesic shooting.

A velocity field is represented by its normalized Fourier coefficients
``c_k = DFT(v)_k / (nx * ny)`` for the signed frequencies ``|kx|, |ky| <= r``.
Real fields have ``c_{-k} = conj(c_k)``, so each conjugate pair is stored
once as ``(sqrt(2) Re c_k, sqrt(2) Im c_k)`` and self-conjugate modes (the
constant mode, and Nyquist modes when ``r = n/2``) as the single real
``c_k``.  With this scaling the codec is an isometry:
``||decode(z)||^2 = sum(z**2)`` for the area-weighted L2 norm.

Ordering is canonical: modes sorted by ``(ky**2 + kx**2, ky, kx)``, the
x-component block followed by the y-component block.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft

from .epdiff import GeodesicPath, rhs_array
from .errors import ConfigError, ShapeError
from .fields import Grid, VectorField
from .spectral import OperatorConfig

__all__ = [
    "LatentConfig",
    "LatentVelocity",
    "LatentGeodesic",
    "encode",
    "decode",
    "latent_shoot",
    "geodesic_mae_curve",
    "DEFAULT_BANDLIMIT",
]

DEFAULT_BANDLIMIT = 8
_SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class LatentConfig:
    grid: Grid
    bandlimit: int = DEFAULT_BANDLIMIT

    def __post_init__(self):
        r = self.bandlimit
        if int(r) != r or r < 0:
            raise ConfigError(f"bandlimit must be a non-negative integer, got {r!r}")
        if 2 * r > min(self.grid.nx, self.grid.ny):
            raise ConfigError(
                f"bandlimit {r} exceeds the Nyquist limit of a {self.grid.nx}x{self.grid.ny} grid")

    @cached_property
    def _layout(self):
        nx, ny, r = self.grid.nx, self.grid.ny, self.bandlimit
        signed = [(sy, sx) for sy in range(-r, r + 1) for sx in range(-r, r + 1)]
        signed.sort(key=lambda k: (k[0] ** 2 + k[1] ** 2, k[0], k[1]))
        seen = set()
        real_idx, real_pos = [], []
        pair_idx, pair_conj, pair_pos = [], [], []
        pos = 0
        for sy, sx in signed:
            k = (sy % ny, sx % nx)
            if k in seen:
                continue  # Nyquist alias of a mode already listed
            kc = ((-sy) % ny, (-sx) % nx)
            seen.update((k, kc))
            if kc == k:
                real_idx.append(k[0] * nx + k[1])
                real_pos.append(pos)
                pos += 1
            else:
                pair_idx.append(k[0] * nx + k[1])
                pair_conj.append(kc[0] * nx + kc[1])
                pair_pos.append(pos)
                pos += 2
        arr = lambda a: np.array(a, dtype=np.int64)  # noqa: E731
        return arr(real_idx), arr(real_pos), arr(pair_idx), arr(pair_conj), arr(pair_pos), pos

    @property
    def component_dim(self) -> int:
        return self._layout[5]

    @property
    def latent_dim(self) -> int:
        return 2 * self.component_dim


@dataclass(frozen=True)
class LatentVelocity:
    config: LatentConfig
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != (self.config.latent_dim,):
            raise ShapeError(f"expected {self.config.latent_dim} coefficients, got {self.coeffs.shape}")


@dataclass(frozen=True)
class LatentGeodesic:
    """Latent velocities for ``t_i = i / N``, stored as an ``(N + 1, D)`` array."""

    config: LatentConfig
    coeffs: np.ndarray

    @property
    def steps(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def latents(self) -> tuple:
        return tuple(LatentVelocity(self.config, c) for c in self.coeffs)

    def flat(self) -> np.ndarray:
        """Time-major concatenation, length ``(N + 1) * D``."""
        return self.coeffs.ravel().copy()

    @classmethod
    def from_flat(cls, config: LatentConfig, flat: np.ndarray) -> LatentGeodesic:
        flat = np.asarray(flat, dtype=float)
        if flat.ndim != 1 or flat.size % config.latent_dim:
            raise ShapeError(f"flat latent of size {flat.size} is not a multiple of {config.latent_dim}")
        return cls(config, flat.reshape(-1, config.latent_dim).copy())

    def velocities(self) -> np.ndarray:
        """Decoded velocities, shape ``(N + 1, 2, ny, nx)``."""
        return decode_array(self.coeffs, self.config)


def encode_array(v: np.ndarray, cfg: LatentConfig) -> np.ndarray:
    """Encode arrays of shape ``(..., 2, ny, nx)`` to ``(..., D)``."""
    ny, nx = cfg.grid.shape
    if v.shape[-3:] != (2, ny, nx):
        raise ShapeError(f"velocity array shape {v.shape} does not match {cfg.grid}")
    real_idx, real_pos, pair_idx, _, pair_pos, m = cfg._layout
    C = scipy.fft.fft2(v).reshape(v.shape[:-2] + (ny * nx,)) / (nx * ny)
    out = np.empty(v.shape[:-3] + (2, m))
    out[..., real_pos] = C[..., real_idx].real
    pc = C[..., pair_idx]
    out[..., pair_pos] = _SQRT2 * pc.real
    out[..., pair_pos + 1] = _SQRT2 * pc.imag
    return out.reshape(v.shape[:-3] + (2 * m,))


def decode_array(z: np.ndarray, cfg: LatentConfig) -> np.ndarray:
    """Decode arrays of shape ``(..., D)`` to ``(..., 2, ny, nx)``."""
    ny, nx = cfg.grid.shape
    real_idx, real_pos, pair_idx, pair_conj, pair_pos, m = cfg._layout
    if z.shape[-1] != 2 * m:
        raise ShapeError(f"latent size {z.shape[-1]} does not match {2 * m}")
    z = z.reshape(z.shape[:-1] + (2, m))
    C = np.zeros(z.shape[:-1] + (ny * nx,), dtype=complex)
    C[..., real_idx] = z[..., real_pos]
    pc = (z[..., pair_pos] + 1j * z[..., pair_pos + 1]) / _SQRT2
    C[..., pair_idx] = pc
    C[..., pair_conj] = pc.conj()
    C = C.reshape(z.shape[:-1] + (ny, nx)) * (nx * ny)
    return scipy.fft.ifft2(C).real


def encode(v: VectorField, cfg: LatentConfig) -> LatentVelocity:
    """Project ``v`` onto the retained modes."""
    if v.grid != cfg.grid:
        raise ShapeError(f"field grid {v.grid} does not match latent grid {cfg.grid}")
    return LatentVelocity(cfg, encode_array(v.data, cfg))


def decode(z: LatentVelocity) -> VectorField:
    """Zero-pad the retained modes and return the real field."""
    return VectorField(z.config.grid, decode_array(z.coeffs, z.config))


def latent_shoot(z0: LatentVelocity, opcfg: OperatorConfig, steps: int) -> LatentGeodesic:
    """Euler-integrate EPDiff inside the latent space.

    Each step decodes the current latent, evaluates the EPDiff right-hand
    side on the grid, and encodes the result, i.e. a Galerkin truncation of
    the full-grid scheme to the retained modes.
    """
    cfg = z0.config
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    h = 1.0 / steps
    out = np.empty((steps + 1, cfg.latent_dim))
    out[0] = z0.coeffs
    z = z0.coeffs
    for i in range(steps):
        v = decode_array(z, cfg)
        z = z + h * encode_array(rhs_array(v, cfg.grid, opcfg), cfg)
        out[i + 1] = z
    return LatentGeodesic(cfg, out)


def geodesic_mae_curve(latent: LatentGeodesic, reference: GeodesicPath) -> list[float]:
    """Mean absolute velocity error at each time index."""
    if latent.steps != reference.steps:
        raise ShapeError(f"step count mismatch: {latent.steps} vs {reference.steps}")
    if latent.config.grid != reference.grid:
        raise ShapeError("latent and reference live on different grids")
    diff = latent.velocities() - reference.as_array()
    return [float(x) for x in np.mean(np.abs(diff), axis=(1, 2, 3))]
