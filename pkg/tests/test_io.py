import struct

import numpy as np
import pytest

from deformgen import denoiser as dn
from deformgen.config import RunConfig, load_config, parse_config, read_pairs, sub_seed
from deformgen.diffusion import DiffusionModel, NoiseSchedule
from deformgen.errors import ConfigError, ParseError, ShapeError
from deformgen.fields import Grid, ScalarField, VectorField
from deformgen.io import (CHECKPOINT_VERSION, load_checkpoint, pgm_read, pgm_write, quantize,
                          read_csv, read_matrix_csv, read_pgm_array, read_velocity,
                          save_checkpoint, write_csv, write_matrix_csv, write_velocity)
from deformgen.latent import LatentConfig
from deformgen.spectral import OperatorConfig


# -- PGM ----------------------------------------------------------------------------

def test_pgm_direct_scaling(tmp_path):
    p = tmp_path / "tiny.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    np.testing.assert_array_equal(read_pgm_array(p), [[0, 1], [128 / 255, 64 / 255]])


def test_pgm_header_comments_and_16bit(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5 # comment\n4 # w\n4\n65535\n" + np.arange(16, dtype=">u2").tobytes())
    arr = pgm_read(p).values
    assert arr[0, 1] == 1 / 65535 and arr.shape == (4, 4)


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_roundtrip_is_exact(tmp_path, rng, maxval):
    g = Grid(8, 6)
    q = quantize(rng.uniform(size=g.shape), maxval) / maxval
    p = tmp_path / "r.pgm"
    pgm_write(ScalarField(g, q), p, maxval)
    back = pgm_read(p)
    assert back.grid == g and np.array_equal(back.values, q)


def test_pgm_truncated_names_counts(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(ParseError, match="expected 16 bytes, found 10") as info:
        read_pgm_array(p)
    assert info.value.offset == 11


@pytest.mark.parametrize("data,offset", [(b"P2\n4 4\n255\n", 0), (b"P5\n4 x\n255\n", 5),
                                         (b"P5\n4 4\n100\n", 7), (b"P5\n4 4", 6)])
def test_pgm_malformed_header_offsets(tmp_path, data, offset):
    p = tmp_path / "m.pgm"
    p.write_bytes(data)
    with pytest.raises(ParseError) as info:
        read_pgm_array(p)
    assert info.value.offset == offset
    assert f"byte {offset}" in str(info.value)


# -- CSV and velocity files ---------------------------------------------------------

def test_csv_roundtrip(tmp_path, rng):
    rows = [(1, 0.1 + 0.2, "a b"), (2, 1e-300, "x")]
    write_csv(tmp_path / "t.csv", ["i", "v", "s"], rows)
    header, back = read_csv(tmp_path / "t.csv")
    assert header == ["i", "v", "s"]
    assert float(back[0][1]) == 0.1 + 0.2 and back[1][2] == "x"
    m = rng.standard_normal((3, 5))
    write_matrix_csv(tmp_path / "m.csv", m)
    assert np.array_equal(read_matrix_csv(tmp_path / "m.csv"), m)


@pytest.mark.parametrize("suffix", [".csv", ".npy"])
def test_velocity_roundtrip(tmp_path, rng, suffix):
    g = Grid(8, 4)
    v = VectorField(g, rng.standard_normal((2, 4, 8)))
    p = tmp_path / f"v{suffix}"
    write_velocity(v, p)
    back = read_velocity(p, g)
    assert np.array_equal(back.data, v.data)
    with pytest.raises(ShapeError):
        read_velocity(p, Grid(8, 8))


def test_velocity_csv_layout(tmp_path):
    p = tmp_path / "v.csv"
    rows = ["1,1,1,1"] * 4 + ["2,2,2,2"] * 4
    p.write_text("\n".join(rows) + "\n")
    v = read_velocity(p)
    assert np.all(v.x == 1) and np.all(v.y == 2)
    p.write_text("1,1,1,1\n" * 3)
    with pytest.raises(ParseError):
        read_velocity(p)


# -- checkpoints --------------------------------------------------------------------

def small_model(rng):
    sched = NoiseSchedule(40)
    lat = LatentConfig(Grid(16, 16), 2)
    D = 3 * lat.latent_dim
    params = dn.init_params(D, 512 + 64, sched.alpha_bar, rng, (7, 5))
    params.skip[:] = rng.standard_normal(D)
    return DiffusionModel(params, sched, lat, 2, OperatorConfig(0.25), rng.standard_normal(D),
                          rng.uniform(0.5, 2.0, D), 512, 64)


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    model = small_model(rng)
    opt = dn.Adam(model.params, lr=3e-4)
    opt.step(model.params, [rng.standard_normal(a.shape) for a in model.params.arrays])
    p = tmp_path / "m.iggc"
    save_checkpoint(p, model, opt)
    back, bopt = load_checkpoint(p)
    for a, b in zip(model.params.arrays, back.params.arrays):
        assert np.array_equal(a, b)
    assert np.array_equal(back.mean, model.mean) and np.array_equal(back.scale, model.scale)
    assert (back.latent, back.steps, back.operator, back.schedule) == (
        model.latent, model.steps, model.operator, model.schedule)
    assert bopt.t == 1 and bopt.lr == 3e-4
    assert all(np.array_equal(a, b) for a, b in zip(opt.m + opt.v, bopt.m + bopt.v))
    q = tmp_path / "again.iggc"
    save_checkpoint(q, back, bopt)
    assert p.read_bytes() == q.read_bytes()


def test_checkpoint_without_optimizer(tmp_path, rng):
    p = tmp_path / "m.iggc"
    save_checkpoint(p, small_model(rng))
    assert load_checkpoint(p)[1] is None


def test_checkpoint_header_layout(tmp_path, rng):
    p = tmp_path / "m.iggc"
    save_checkpoint(p, small_model(rng))
    buf = p.read_bytes()
    assert buf[:4] == b"IGGC"
    version, count = struct.unpack_from("<HH", buf, 4)
    assert version == CHECKPOINT_VERSION and count == 4
    assert [buf[8 + 20 * i:12 + 20 * i] for i in range(4)] == [b"LATC", b"SCHD", b"NORM", b"DNSR"]


def test_checkpoint_version_refused(tmp_path, rng):
    p = tmp_path / "m.iggc"
    save_checkpoint(p, small_model(rng))
    buf = bytearray(p.read_bytes())
    buf[4:6] = struct.pack("<H", CHECKPOINT_VERSION + 1)
    p.write_bytes(bytes(buf))
    with pytest.raises(ParseError, match="version 2 is not supported"):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path, rng):
    p = tmp_path / "m.iggc"
    save_checkpoint(p, small_model(rng))
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(ParseError):
        load_checkpoint(p)
    p.write_bytes(b"NOPE")
    with pytest.raises(ParseError):
        load_checkpoint(p)


# -- configuration ------------------------------------------------------------------

def test_config_defaults_feed_modules():
    cfg = RunConfig()
    assert cfg.grid == Grid(32, 32)
    assert cfg.schedule.T == 500 and cfg.training.batch_size == 36 and cfg.training.lr == 1e-4
    assert cfg.latent.latent_dim == 578 and cfg.hidden_widths == (512, 512, 512)
    assert cfg.generator.frames == cfg.steps + 1


def test_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nnx = 16\n\nalpha = 0.5  # trailing\nintegrator = rk4\n")
    cfg = load_config(p)
    assert cfg.nx == 16 and cfg.alpha == 0.5 and cfg.integrator == "rk4"
    assert parse_config(read_pairs(p)) == cfg


@pytest.mark.parametrize("text,err", [
    ("bogus = 1\n", ConfigError),
    ("nx = 15\n", ConfigError),
    ("alpha = -1\n", ConfigError),
    ("bandlimit = 40\n", ConfigError),
    ("integrator = midpoint\n", ConfigError),
    ("lr = fast\n", ConfigError),
    ("hidden = 5,x\n", ConfigError),
    ("nx = 16\nnx = 32\n", ConfigError),
    ("nx 16\n", ParseError),
])
def test_config_rejects_bad_values(tmp_path, text, err):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(err):
        load_config(p)


def test_config_to_text_roundtrips(tmp_path):
    cfg = RunConfig().replace(seed=7, lam=123.5, hidden="8,8")
    p = tmp_path / "c.cfg"
    p.write_text(cfg.to_text())
    assert load_config(p) == cfg


def test_sub_seeds_are_distinct_and_stable():
    assert sub_seed(0, "data") == sub_seed(0, "data")
    assert len({sub_seed(0, "data"), sub_seed(0, "training"), sub_seed(1, "data")}) == 3
