"""End-to-end glue: datasets on disk, pair encoding, training and sample export."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diffusion import DiffusionModel, SampleResult, train
from .errors import ConfigError, ShapeError
from .io import pgm_read, pgm_write, write_csv, write_matrix_csv
from .latent import LatentGeodesic, encode, latent_shoot
from .metrics import detjac_stats
from .registration import register
from .synthetic import generate

__all__ = [
    "write_dataset",
    "read_dataset",
    "encode_pair",
    "encode_dataset",
    "train_from_sequences",
    "write_sample",
    "detjac_heatmap",
]

log = logging.getLogger(__name__)


def _seq_dir(root: Path, i: int) -> Path:
    return root / f"seq_{i:03d}"


def write_dataset(root, sequences) -> None:
    """Write ``(frames, text, spec)`` tuples as PGM frames plus a text file each."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (frames, text, spec) in enumerate(sequences):
        d = _seq_dir(root, i)
        d.mkdir(exist_ok=True)
        for k, f in enumerate(frames):
            pgm_write(f, d / f"frame_{k:02d}.pgm")
        (d / "text.txt").write_text(text + "\n")
        rows.append((i, spec.lobes, spec.growth, spec.direction, text))
    write_csv(root / "index.csv", ["sequence", "lobes", "growth", "direction", "text"], rows)


def generate_dataset(root, cfg: RunConfig):
    seqs = generate(cfg.grid, cfg.generator)
    write_dataset(root, seqs)
    return seqs


def read_dataset(root):
    """Return ``[(frames, text)]`` for every ``seq_*`` directory under ``root``."""
    root = Path(root)
    dirs = sorted(p for p in root.glob("seq_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no sequences found under {root}")
    out = []
    for d in dirs:
        frames = [pgm_read(p) for p in sorted(d.glob("frame_*.pgm"))]
        if len(frames) < 2:
            raise ShapeError(f"{d}: need at least two frames")
        out.append((frames, (d / "text.txt").read_text().strip()))
    return out


def encode_pair(template, target, cfg: RunConfig):
    """Register ``template`` to ``target`` and shoot the encoded velocity in latent space.

    Returns ``(LatentGeodesic, RegistrationResult)``.
    """
    res = register(template, target, cfg.registration)
    z0 = encode(res.v0, cfg.latent)
    return latent_shoot(z0, cfg.operator, cfg.steps), res


def encode_dataset(sequences, cfg: RunConfig):
    """``[(LatentGeodesic, template, text)]`` from (first, last) frame pairs."""
    triples = []
    for i, (frames, text) in enumerate(sequences):
        if frames[0].grid != cfg.grid:
            raise ShapeError(f"sequence {i}: grid {frames[0].grid} does not match config {cfg.grid}")
        lg, res = encode_pair(frames[0], frames[-1], cfg)
        h = res.energy_history
        log.info("sequence %d: data %.4g -> %.4g in %d iterations, min DetJac %.3f",
                 i, h[0][2], h[-1][2], res.iterations, res.min_detjac)
        triples.append((lg, frames[0], text))
    return triples


def train_from_sequences(sequences, cfg: RunConfig, model: DiffusionModel | None = None,
                         optimizer=None):
    triples = encode_dataset(sequences, cfg)
    return train(triples, cfg.schedule, cfg.training, cfg.operator, model, optimizer)


def detjac_heatmap(d: np.ndarray) -> np.ndarray:
    """Map DetJac values to [0, 1] intensities: 0 -> 0, 1 -> 0.5, 2 and above -> 1."""
    return np.clip(d / 2.0, 0.0, 1.0)


def write_sample(out: Path, res: SampleResult, reference=None) -> dict:
    """Write one sample's frames, DetJac map and latent trajectory.

    Returns its metrics row (SSIM against ``reference`` when given).
    """
    from .metrics import ssim

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(res.frames):
        pgm_write(f, out / f"frame_{k:02d}.pgm")
    d = res.detjac.values
    write_matrix_csv(out / "detjac.csv", d)
    pgm_write(detjac_heatmap(d), out / "detjac.pgm")
    (out / "latent.bin").write_bytes(np.ascontiguousarray(res.latent.coeffs, dtype="<f8").tobytes())
    stats = detjac_stats(res.deformation.final)
    row = {"seed": res.seed, "min_detjac": stats.min, "mean_detjac": stats.mean,
           "negative_fraction": stats.negative_fraction}
    if reference is not None:
        final = np.clip(res.frames[-1].values, 0.0, 1.0)
        row["ssim_final"] = ssim(type(reference)(reference.grid, final), reference)
    write_csv(out / "metrics.csv", list(row), [list(row.values())])
    return row


def read_latent(path, model: DiffusionModel) -> LatentGeodesic:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if raw.size != model.data_dim:
        raise ConfigError(f"{path}: latent has {raw.size} values, model expects {model.data_dim}")
    return LatentGeodesic.from_flat(model.latent, raw.astype(float))
