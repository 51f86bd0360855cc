import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformgen.epdiff import GeodesicPath, shoot
from deformgen.errors import ConfigError, ShapeError
from deformgen.fields import Grid, VectorField, inner_product, linf_error
from deformgen.latent import (LatentConfig, LatentGeodesic, LatentVelocity, decode, encode,
                              geodesic_mae_curve, latent_shoot)
from deformgen.spectral import OperatorConfig

from helpers import smooth_vector

G32 = Grid(32, 32)
CFG = LatentConfig(G32, 8)


def bandlimited(cfg, rng):
    """A random real field whose spectrum lives on the retained modes."""
    return decode(LatentVelocity(cfg, rng.standard_normal(cfg.latent_dim)))


def retained_mask(grid, r):
    ky = np.fft.fftfreq(grid.ny) * grid.ny
    kx = np.fft.fftfreq(grid.nx) * grid.nx
    return (np.abs(ky)[:, None] <= r) & (np.abs(kx)[None, :] <= r)


def test_latent_dim():
    assert CFG.latent_dim == 2 * 17 * 17 == 578
    assert LatentConfig(G32, 16).latent_dim == 2 * 32 * 32


def test_bandlimit_validation():
    with pytest.raises(ConfigError):
        LatentConfig(G32, 17)
    with pytest.raises(ConfigError):
        LatentConfig(G32, -1)


def test_encode_trivial():
    assert np.all(encode(VectorField.zeros(G32), CFG).coeffs == 0)
    z = encode(VectorField.constant(G32, 0.3, -0.2), CFG).coeffs
    # DC entries lead each component block
    half = CFG.latent_dim // 2
    assert z[0] == pytest.approx(0.3, abs=1e-15) and z[half] == pytest.approx(-0.2, abs=1e-15)
    z[[0, half]] = 0
    assert np.abs(z).max() < 1e-15


def test_roundtrips(rng):
    v = bandlimited(CFG, rng)
    assert linf_error(decode(encode(v, CFG)), v) < 1e-10
    z = rng.standard_normal(CFG.latent_dim)
    assert np.max(np.abs(encode(decode(LatentVelocity(CFG, z)), CFG).coeffs - z)) < 1e-12
    assert np.all(decode(LatentVelocity(CFG, np.zeros(CFG.latent_dim))).data == 0)


def test_parseval_residual(rng):
    v = VectorField(G32, rng.standard_normal((2, 32, 32)))
    resid = VectorField(G32, decode(encode(v, CFG)).data - v.data)
    c = np.fft.fft2(v.data) / G32.nx / G32.ny
    above = np.sum(np.abs(c[:, ~retained_mask(G32, 8)]) ** 2)
    assert inner_product(resid, resid) == pytest.approx(above, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 5, 8, 16]))
def test_parseval_isometry(seed, r):
    cfg = LatentConfig(G32, r)
    z = np.random.default_rng(seed).standard_normal(cfg.latent_dim)
    v = decode(LatentVelocity(cfg, z))
    assert inner_product(v, v) == pytest.approx(np.sum(z * z), rel=1e-10)


def test_shape_errors():
    with pytest.raises(ShapeError):
        LatentVelocity(CFG, np.zeros(5))
    with pytest.raises(ShapeError):
        encode(VectorField.zeros(Grid(16, 16)), CFG)
    with pytest.raises(ShapeError):
        LatentGeodesic.from_flat(CFG, np.zeros(CFG.latent_dim + 1))


def test_flat_is_time_major(rng):
    coeffs = rng.standard_normal((11, CFG.latent_dim))
    lg = LatentGeodesic(CFG, coeffs)
    flat = lg.flat()
    assert flat.size == 11 * 578
    assert np.array_equal(flat[578:1156], coeffs[1])
    assert np.array_equal(LatentGeodesic.from_flat(CFG, flat).coeffs, coeffs)


def test_latent_shoot_trivial():
    op = OperatorConfig(3.0)
    zero = latent_shoot(LatentVelocity(CFG, np.zeros(CFG.latent_dim)), op, 10)
    assert np.all(zero.coeffs == 0) and zero.steps == 10
    z0 = encode(VectorField.constant(G32, 0.2, -0.1), CFG)
    path = latent_shoot(z0, op, 10)
    assert np.all(path.coeffs == z0.coeffs)


def test_latent_shoot_tracks_full_grid():
    op = OperatorConfig(3.0)
    v0 = VectorField.from_function(G32, lambda X, Y: (0.1 * np.sin(2 * np.pi * Y), 0 * X))
    ref = shoot(v0, op, 10)
    curve = geodesic_mae_curve(latent_shoot(encode(v0, CFG), op, 10), ref)
    assert len(curve) == 11
    assert max(curve) <= 5e-3
    assert all(b >= a - 1e-9 for a, b in zip(curve, curve[1:]))


def test_error_grows_for_generic_field(rng):
    op = OperatorConfig(0.03)
    v0 = smooth_vector(G32, rng, 0.03, 0.2)
    ref = shoot(v0, op, 10)
    curve = geodesic_mae_curve(latent_shoot(encode(v0, CFG), op, 10), ref)
    assert curve[-1] > curve[0] > 0
    assert all(b >= a - 1e-9 for a, b in zip(curve, curve[1:]))


def test_full_band_latent_shoot_is_exact(rng):
    op = OperatorConfig(1.0)
    cfg = LatentConfig(G32, 16)
    v0 = smooth_vector(G32, rng, 1.0, 0.2)
    ref = shoot(v0, op, 10).as_array()
    got = latent_shoot(encode(v0, cfg), op, 10).velocities()
    assert np.abs(got - ref).max() <= 1e-9


def test_mae_curve_examples(rng):
    op = OperatorConfig(3.0)
    zero = shoot(VectorField.zeros(G32), op, 4)
    lz = LatentGeodesic(CFG, np.zeros((5, CFG.latent_dim)))
    assert geodesic_mae_curve(lz, zero) == [0.0] * 5
    ref = GeodesicPath(tuple(bandlimited(CFG, rng) for _ in range(4)), op)
    lg = LatentGeodesic(CFG, np.stack([encode(x, CFG).coeffs for x in ref.velocities]))
    assert max(geodesic_mae_curve(lg, ref)) <= 1e-10
    with pytest.raises(ShapeError):
        geodesic_mae_curve(lz, ref)
