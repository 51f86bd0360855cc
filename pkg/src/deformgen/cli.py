"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(unreadable or malformed input, shape mismatch), 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, load_config, parse_config
from .diffusion import sample_many
from .epdiff import IntegratorKind, kinetic_energy, shoot
from .errors import ConfigError, NumericError, ParseError, ShapeError, StallError
from .fields import VectorField
from .flow import det_jacobian, integrate_flow, warp
from .io import (load_checkpoint, pgm_read, pgm_write, read_csv, read_matrix_csv,
                 read_velocity, save_checkpoint, write_csv, write_matrix_csv,
                 write_velocity)
from .latent import decode_array, geodesic_mae_curve
from .metrics import confidence_maps, coverage, detjac_stats, ssim
from .registration import register

log = logging.getLogger("deformgen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ----------------------------------------------------------------------------
# helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for key in ("seed", "samples", "delta_i", "delta_t", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            pairs[key] = str(val)
    return parse_config(pairs, cfg)


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _long_rows(arr):
    """Rows ``(t, iy, ix, x, y)`` for an ``(N + 1, 2, ny, nx)`` array."""
    n, _, ny, nx = arr.shape
    t, iy, ix = np.meshgrid(np.arange(n), np.arange(ny), np.arange(nx), indexing="ij")
    return zip(t.ravel(), iy.ravel(), ix.ravel(), arr[:, 0].ravel(), arr[:, 1].ravel())


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sample_dirs(root: Path):
    return sorted(p for p in root.glob("sample_*") if p.is_dir())


# ----------------------------------------------------------------------------
# commands

def cmd_shoot(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    v0 = read_velocity(args.v0, cfg.grid)
    path = shoot(v0, cfg.operator, cfg.steps, IntegratorKind(cfg.integrator))
    deformation = integrate_flow(path)
    vel = path.as_array()
    write_csv(out / "velocities.csv", ["t", "iy", "ix", "vx", "vy"], _long_rows(vel))
    write_csv(out / "displacements.csv", ["t", "iy", "ix", "ux", "uy"],
              _long_rows(deformation.as_array()))
    write_csv(out / "energy.csv", ["t", "energy"],
              [(i, kinetic_energy(v, cfg.operator)) for i, v in enumerate(path.velocities)])
    d = det_jacobian(deformation.final).values
    write_matrix_csv(out / "detjac.csv", d)
    pgm_write(pipeline.detjac_heatmap(d), out / "detjac.pgm")
    if args.template:
        tpl = pgm_read(args.template)
        for k, phi in enumerate(deformation.deformations):
            pgm_write(warp(tpl, phi), out / f"warped_{k:02d}.pgm")
    log.info("shoot: min DetJac %.6g", d.min())
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    S, T = pgm_read(args.source), pgm_read(args.target)
    if S.grid != T.grid:
        raise ShapeError(f"source is {S.grid.nx}x{S.grid.ny} but target is {T.grid.nx}x{T.grid.ny}")
    try:
        res = register(S, T, cfg.replace(nx=S.grid.nx, ny=S.grid.ny).registration)
    except StallError as err:
        res = err.result
        log.warning("%s; writing the last accepted iterate", err)
    write_velocity(res.v0, out / "v0.csv")
    write_velocity(res.deformation.final.displacement, out / "phi1.csv")
    write_csv(out / "energy_history.csv", ["iteration", "total", "data", "reg"], res.energy_history)
    stats = detjac_stats(res.deformation.final)
    write_csv(out / "detjac_stats.csv", ["min", "mean", "negative_fraction", "converged"],
              [(stats.min, stats.mean, stats.negative_fraction, int(res.converged))])
    d = det_jacobian(res.deformation.final).values
    write_matrix_csv(out / "detjac.csv", d)
    pgm_write(warp(S, res.deformation.final), out / "warped.pgm")
    h = res.energy_history
    log.info("register: data %.6g -> %.6g in %d iterations", h[0][2], h[-1][2], res.iterations)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    root = Path(args.out_dir or cfg.data_dir)
    pipeline.generate_dataset(root, cfg)
    log.info("gen-data: %d sequences written to %s", cfg.sequences, root)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ckpt = Path(args.checkpoint or cfg.checkpoint)
    seqs = pipeline.read_dataset(args.data_dir or cfg.data_dir)
    model = opt = None
    old_log = []
    if args.resume:
        model, opt = load_checkpoint(ckpt)
        if (out / "loss.csv").exists():
            old_log = [(int(s), float(v)) for s, v in read_csv(out / "loss.csv")[1]]
    model, result = pipeline.train_from_sequences(seqs, cfg, model, opt)
    save_checkpoint(ckpt, model, result.optimizer)
    write_csv(out / "loss.csv", ["step", "loss"], old_log + result.loss_log)
    write_csv(out / "validation.csv", ["val_start", "val_end"], [(result.val_start, result.val_end)])
    if cfg.epochs and not result.val_decreased:
        log.warning("validation loss did not decrease (%.6g -> %.6g)", result.val_start, result.val_end)
    log.info("train: %d steps, validation loss %.6g -> %.6g", len(result.loss_log),
             result.val_start, result.val_end)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model, _ = load_checkpoint(args.checkpoint)
    tpl = pgm_read(args.template)
    ref = pgm_read(args.reference) if args.reference else None
    g = None if args.pure_conditional else cfg.guidance
    seeds = list(range(cfg.seed, cfg.seed + cfg.samples))
    rows = []
    chunk = 100
    for start in range(0, len(seeds), chunk):
        for res in sample_many(tpl, args.text, model, g, seeds[start:start + chunk]):
            rows.append(pipeline.write_sample(out / f"sample_{res.seed:06d}", res, ref))
    header = list(rows[0])
    write_csv(out / "summary.csv", header, [list(r.values()) for r in rows])
    positive = sum(r["min_detjac"] > 0 for r in rows)
    write_csv(out / "topology.csv", ["samples", "positive_min_detjac", "rate"],
              [(len(rows), positive, positive / len(rows))])
    manifest = {
        "checkpoint": Path(args.checkpoint).name,
        "checkpoint_sha256": _sha256(args.checkpoint),
        "template": Path(args.template).name,
        "template_sha256": _sha256(args.template),
        "text": args.text,
        "seeds": f"{seeds[0]}..{seeds[-1]}",
        "delta_i": "none" if g is None else repr(g.delta_i),
        "delta_t": "none" if g is None else repr(g.delta_t),
        "pure_conditional": int(bool(args.pure_conditional)),
    }
    text = "".join(f"{k} = {v}\n" for k, v in manifest.items())
    (out / "manifest.txt").write_text(text + "# run configuration\n" + cfg.to_text())
    log.info("sample: %d/%d samples with positive min DetJac", positive, len(rows))
    return EXIT_OK


def cmd_metrics(args) -> int:
    _config(args)  # validates --config and --set
    root = Path(args.dir)
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    dirs = _sample_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"no sample_* directories under {root}")
    ref = pgm_read(args.reference) if args.reference else None
    model = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    table, curves = [], []
    for d in dirs:
        dj = read_matrix_csv(d / "detjac.csv")
        frames = sorted(d.glob("frame_*.pgm"))
        row = [d.name, float(dj.min()), float(dj.mean()), float(np.mean(dj < 0))]
        if ref is not None:
            row.append(ssim(pgm_read(frames[-1]), ref))
        table.append(row)
        if model is not None:
            lg = pipeline.read_latent(d / "latent.bin", model)
            v0 = decode_array(lg.coeffs[0], model.latent)
            full = shoot(VectorField(model.latent.grid, v0), model.operator, lg.steps)
            for t, e in enumerate(geodesic_mae_curve(lg, full)):
                curves.append((d.name, t, e))
    header = ["sample", "min_detjac", "mean_detjac", "negative_fraction"]
    if ref is not None:
        header.append("ssim_final")
    write_csv(out / "metrics_table.csv", header, table)
    mins = np.array([r[1] for r in table])
    summary = [("samples", len(table)), ("positive_min_detjac", int(np.sum(mins > 0))),
               ("positive_rate", float(np.mean(mins > 0)))]
    if ref is not None:
        s = np.array([r[4] for r in table])
        summary += [("ssim_mean", float(s.mean())), ("ssim_std", float(s.std()))]
    write_csv(out / "metrics_summary.csv", ["statistic", "value"], summary)
    if curves:
        write_csv(out / "mae_curves.csv", ["sample", "t", "mae"], curves)
    log.info("metrics: %d samples", len(table))
    return EXIT_OK


def _confidence_sets(root: Path):
    """Frame-indexed lists of images: one list per time index, or one flat list."""
    dirs = _sample_dirs(root)
    if dirs:
        per = [sorted(d.glob("frame_*.pgm")) for d in dirs]
        n = min(len(p) for p in per)
        return [(f"t{k:02d}", [p[k] for p in per]) for k in range(n)]
    files = sorted(root.glob("*.pgm"))
    return [("all", files)] if files else []


def cmd_confidence(args) -> int:
    _config(args)  # validates --config and --set
    root = Path(args.dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    out = Path(args.out) if args.out else root / "confidence"
    out.mkdir(parents=True, exist_ok=True)
    sets = _confidence_sets(root)
    if not sets:
        raise FileNotFoundError(f"no sample images under {root}")
    rows = []
    for label, files in sets:
        imgs = [pgm_read(p) for p in files]
        maps = confidence_maps(imgs)
        for name in ("mean", "lower", "upper", "ci_width"):
            field = getattr(maps, name)
            write_matrix_csv(out / f"{name}_{label}.csv", field.values)
            pgm_write(field, out / f"{name}_{label}.pgm")
        rows.append((label, maps.sample_count, coverage(maps, imgs),
                     float(maps.ci_width.values.mean())))
    write_csv(out / "coverage.csv", ["frame", "samples", "coverage", "mean_ci_width"], rows)
    log.info("confidence: %d map sets written to %s", len(rows), out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deformgen", parents=[common],
                                description="Geodesic image registration and deformation generation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("shoot", parents=[common], help="shoot a geodesic from an initial velocity")
    s.add_argument("v0", help="initial velocity (.npy or CSV)")
    s.add_argument("--template", help="PGM image to warp along the path")
    s.add_argument("--out")
    s.set_defaults(func=cmd_shoot)

    s = sub.add_parser("register", parents=[common], help="register two PGM images")
    s.add_argument("source")
    s.add_argument("target")
    s.add_argument("--out")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic growth dataset")
    s.add_argument("out_dir", nargs="?")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train the diffusion model")
    s.add_argument("data_dir", nargs="?")
    s.add_argument("--checkpoint")
    s.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="sample deformations of a template")
    s.add_argument("checkpoint")
    s.add_argument("template")
    s.add_argument("--text", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--delta-i", dest="delta_i", type=float)
    s.add_argument("--delta-t", dest="delta_t", type=float)
    s.add_argument("--pure-conditional", action="store_true",
                   help="debug: use the fully conditional prediction without guidance")
    s.add_argument("--reference", help="ground-truth final frame for SSIM")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("metrics", parents=[common], help="evaluate a sample directory")
    s.add_argument("dir")
    s.add_argument("--reference", help="ground-truth final frame for SSIM")
    s.add_argument("--checkpoint", help="model used to compute velocity MAE curves")
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("confidence", parents=[common], help="pixel-wise confidence maps")
    s.add_argument("dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_confidence)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"deformgen: configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ShapeError, OSError) as err:
        print(f"deformgen: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, StallError) as err:
        print(f"deformgen: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
