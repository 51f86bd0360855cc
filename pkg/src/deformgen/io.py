"""File formats: binary PGM images, CSV tables, velocity files and model checkpoints.

Checkpoint layout (all integers and floats little-endian)::

    b"IGGC"  u16 version  u16 section count
    section table: count x (4-byte tag, u64 offset, u64 length)
    section payloads

Sections: ``LATC`` latent/operator config, ``SCHD`` noise schedule,
``NORM`` latent standardization, ``DNSR`` denoiser shapes and weights
(float64, row-major, followed by the skip gains), and optionally ``ADAM`` optimizer state.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .denoiser import Adam, DenoiserParams
from .diffusion import DiffusionModel, NoiseSchedule
from .errors import ParseError, ShapeError
from .fields import Grid, ScalarField, VectorField
from .latent import LatentConfig
from .spectral import OperatorConfig

__all__ = [
    "read_pgm_array",
    "pgm_read",
    "pgm_write",
    "quantize",
    "write_csv",
    "read_csv",
    "read_velocity",
    "write_velocity",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"IGGC"
CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------------------
# PGM

def _header_token(buf: bytes, pos: int):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError(f"unexpected end of PGM header at byte {start}", offset=start)
    return buf[start:pos], start, pos


def read_pgm_array(path) -> np.ndarray:
    """Parse a binary (P5) PGM into an ``(height, width)`` array scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ParseError(f"bad PGM magic {buf[:2]!r} at byte 0 (expected b'P5')", offset=0)
    pos = 2
    vals = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _header_token(buf, pos)
        if not tok.isdigit() or int(tok) <= 0:
            raise ParseError(f"invalid PGM {name} {tok!r} at byte {start}", offset=start)
        vals.append(int(tok))
    width, height, maxval = vals
    if maxval not in (255, 65535):
        raise ParseError(f"unsupported PGM maxval {maxval} at byte {start} (expected 255 or 65535)",
                         offset=start)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError(f"missing whitespace after PGM header at byte {pos}", offset=pos)
    pos += 1
    bpp = 1 if maxval == 255 else 2
    expected = width * height * bpp
    actual = len(buf) - pos
    if actual != expected:
        raise ParseError(
            f"PGM pixel data at byte {pos}: expected {expected} bytes, found {actual}", offset=pos)
    dtype = np.uint8 if bpp == 1 else np.dtype(">u2")
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return data.reshape(height, width).astype(float) / maxval


def pgm_read(path) -> ScalarField:
    arr = read_pgm_array(path)
    return ScalarField(Grid(arr.shape[1], arr.shape[0]), arr)


def quantize(values: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Integer levels for intensities in [0, 1] (values are clipped)."""
    return np.rint(np.clip(values, 0.0, 1.0) * maxval).astype(np.int64)


def pgm_write(image, path, maxval: int = 255):
    """Write a ScalarField (or 2-D array) in [0, 1] as a P5 PGM."""
    arr = image.values if isinstance(image, ScalarField) else np.asarray(image, dtype=float)
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    q = quantize(arr, maxval)
    height, width = arr.shape
    data = q.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (width, height, maxval) + data)


# ----------------------------------------------------------------------------
# CSV

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def read_csv(path):
    """Return ``(header, rows)`` with every cell as a string."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty CSV", offset=0)
    return rows[0], rows[1:]


def write_matrix_csv(path, arr: np.ndarray):
    """A 2-D array as CSV, one grid row per line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(arr):
            w.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        return np.array([[float(x) for x in r] for r in rows])
    except ValueError as err:
        raise ParseError(f"{path}: {err}") from err


# ----------------------------------------------------------------------------
# velocity files

def read_velocity(path, grid: Grid | None = None) -> VectorField:
    """Read an initial velocity from ``.npy`` (shape ``(2, ny, nx)``) or CSV.

    A CSV holds the x-component rows followed by the y-component rows
    (``2 * ny`` lines of ``nx`` values).
    """
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False).astype(float)
    else:
        m = read_matrix_csv(path)
        if m.shape[0] % 2:
            raise ParseError(f"{path}: expected an even number of rows, got {m.shape[0]}")
        arr = m.reshape(2, m.shape[0] // 2, m.shape[1])
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ShapeError(f"{path}: velocity array has shape {arr.shape}, expected (2, ny, nx)")
    g = Grid(arr.shape[2], arr.shape[1])
    if grid is not None and g != grid:
        raise ShapeError(f"{path}: velocity grid {g} does not match configured {grid}")
    return VectorField(g, arr)


def write_velocity(v: VectorField, path):
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, v.data)
    else:
        write_matrix_csv(path, v.data.reshape(-1, v.grid.nx))


# ----------------------------------------------------------------------------
# checkpoints

def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _pack_model(model: DiffusionModel, optimizer: Adam | None):
    sec = {}
    g = model.latent.grid
    op = model.operator
    sec[b"LATC"] = struct.pack("<IIIIdI", g.nx, g.ny, model.latent.bandlimit, model.steps,
                               op.alpha, op.power)
    s = model.schedule
    sec[b"SCHD"] = struct.pack("<Idd", s.T, s.beta_start, s.beta_end)
    sec[b"NORM"] = struct.pack("<I", model.mean.size) + _f64(model.mean) + _f64(model.scale)
    p = model.params
    head = struct.pack("<IIIIII", p.data_dim, p.cond_dim, p.time_dim, model.image_dim,
                       model.text_dim, len(p.weights))
    head += b"".join(struct.pack("<II", *W.shape) for W in p.weights)
    sec[b"DNSR"] = head + b"".join(_f64(a) for a in p.arrays)
    if optimizer is not None:
        sec[b"ADAM"] = (struct.pack("<Qdddd", optimizer.t, optimizer.lr, optimizer.beta1,
                                    optimizer.beta2, optimizer.eps)
                        + b"".join(_f64(a) for a in optimizer.m)
                        + b"".join(_f64(a) for a in optimizer.v))
    return sec


def save_checkpoint(path, model: DiffusionModel, optimizer: Adam | None = None):
    sections = _pack_model(model, optimizer)
    header = CHECKPOINT_MAGIC + struct.pack("<HH", CHECKPOINT_VERSION, len(sections))
    offset = len(header) + 20 * len(sections)
    table, payload = b"", b""
    for tag, body in sections.items():
        table += tag + struct.pack("<QQ", offset, len(body))
        offset += len(body)
        payload += body
    Path(path).write_bytes(header + table + payload)


class _Reader:
    def __init__(self, buf, start, end, tag):
        self.buf, self.pos, self.end, self.tag = buf, start, end, tag

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise ParseError(f"section {self.tag} truncated at byte {self.pos}", offset=self.pos)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def floats(self, shape):
        n = int(np.prod(shape))
        if self.pos + 8 * n > self.end:
            raise ParseError(f"section {self.tag} truncated at byte {self.pos}", offset=self.pos)
        arr = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.pos).reshape(shape)
        self.pos += 8 * n
        return arr.astype(np.float64)


def load_checkpoint(path):
    """Return ``(DiffusionModel, Adam or None)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (magic {buf[:4]!r} at byte 0)", offset=0)
    if len(buf) < 8:
        raise ParseError(f"{path}: truncated header", offset=len(buf))
    version, count = struct.unpack_from("<HH", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: checkpoint format version {version} is not supported "
                         f"(this build reads version {CHECKPOINT_VERSION})", offset=4)
    sections = {}
    for i in range(count):
        at = 8 + 20 * i
        if at + 20 > len(buf):
            raise ParseError(f"{path}: section table truncated at byte {at}", offset=at)
        tag = buf[at:at + 4]
        off, length = struct.unpack_from("<QQ", buf, at + 4)
        if off + length > len(buf):
            raise ParseError(f"{path}: section {tag!r} extends past the end of file", offset=at)
        sections[tag] = _Reader(buf, off, off + length, tag)
    for tag in (b"LATC", b"SCHD", b"NORM", b"DNSR"):
        if tag not in sections:
            raise ParseError(f"{path}: missing section {tag.decode()}")

    nx, ny, r, steps, alpha, power = sections[b"LATC"].unpack("<IIIIdI")
    latent = LatentConfig(Grid(nx, ny), r)
    operator = OperatorConfig(alpha, power)
    T, b0, b1 = sections[b"SCHD"].unpack("<Idd")
    sched = NoiseSchedule(T, b0, b1)
    rd = sections[b"NORM"]
    (D,) = rd.unpack("<I")
    mean, scale = rd.floats((D,)), rd.floats((D,))
    rd = sections[b"DNSR"]
    data_dim, cond_dim, time_dim, image_dim, text_dim, nl = rd.unpack("<IIIIII")
    shapes = [rd.unpack("<II") for _ in range(nl)]
    Ws, bs = [], []
    for shp in shapes:
        Ws.append(rd.floats(shp))
        bs.append(rd.floats((shp[1],)))
    skip = rd.floats((data_dim,))
    params = DenoiserParams(data_dim, cond_dim, time_dim, Ws, bs, skip, sched.alpha_bar)
    model = DiffusionModel(params, sched, latent, steps, operator, mean, scale, image_dim, text_dim)

    opt = None
    if b"ADAM" in sections:
        rd = sections[b"ADAM"]
        t, lr, beta1, beta2, eps = rd.unpack("<Qdddd")
        opt = Adam(params, lr, beta1, beta2, eps)
        opt.t = t
        opt.m = [rd.floats(a.shape) for a in params.arrays]
        opt.v = [rd.floats(a.shape) for a in params.arrays]
    return model, opt
