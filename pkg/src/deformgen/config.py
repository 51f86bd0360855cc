"""Plain-text ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Unknown keys are rejected and
every value is checked against the invariants of the configuration objects
it feeds, before any computation starts.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .diffusion import GuidanceConfig, NoiseSchedule, TrainConfig
from .epdiff import IntegratorKind
from .errors import ConfigError, ParseError
from .fields import Grid
from .latent import LatentConfig
from .registration import RegistrationConfig
from .spectral import OperatorConfig
from .synthetic import GeneratorConfig

__all__ = ["RunConfig", "load_config", "parse_config", "sub_seed"]


@dataclass(frozen=True)
class RunConfig:
    # grid and metric
    nx: int = 32
    ny: int = 32
    alpha: float = 0.03
    power: int = 3
    # registration / shooting
    lam: float = 1e4
    steps: int = 10
    integrator: str = "euler"
    reg_max_iters: int = 150
    reg_step_size: float = 1e-2
    # latent space
    bandlimit: int = 8
    # diffusion
    T: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 1e-4
    batch_size: int = 36
    epochs: int = 2000
    weight_decay: float = 1e-4
    p_uncond: float = 0.1
    hidden: str = "512,512,512"
    delta_i: float = 1.5
    delta_t: float = 2.0
    # data generation
    sequences: int = 64
    growth_min: float = 0.05
    growth_max: float = 0.30
    # bookkeeping
    seed: int = 0
    samples: int = 1
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint: str = "model.iggc"

    def __post_init__(self):
        self.validate()

    # derived configuration objects; constructing them runs their checks
    @property
    def grid(self) -> Grid:
        return Grid(self.nx, self.ny)

    @property
    def operator(self) -> OperatorConfig:
        return OperatorConfig(self.alpha, self.power)

    @property
    def registration(self) -> RegistrationConfig:
        return RegistrationConfig(lam=self.lam, operator=self.operator, steps=self.steps,
                                  integrator=IntegratorKind(self.integrator),
                                  max_iters=self.reg_max_iters, step_size=self.reg_step_size)

    @property
    def latent(self) -> LatentConfig:
        return LatentConfig(self.grid, self.bandlimit)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.T, self.beta_start, self.beta_end)

    @property
    def hidden_widths(self) -> tuple:
        try:
            widths = tuple(int(w) for w in self.hidden.split(","))
        except ValueError:
            raise ConfigError(f"hidden must be comma-separated integers, got {self.hidden!r}")
        if not widths or min(widths) < 1:
            raise ConfigError(f"hidden widths must be positive, got {self.hidden!r}")
        return widths

    @property
    def training(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, weight_decay=self.weight_decay,
                           epochs=self.epochs, p_uncond=self.p_uncond,
                           seed=sub_seed(self.seed, "training"), hidden=self.hidden_widths)

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.delta_i, self.delta_t)

    @property
    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(self.sequences, self.steps + 1, self.growth_min, self.growth_max,
                               sub_seed(self.seed, "data"))

    def validate(self):
        try:
            IntegratorKind(self.integrator)
        except ValueError:
            raise ConfigError(f"integrator must be 'euler' or 'rk4', got {self.integrator!r}")
        if self.samples < 1:
            raise ConfigError(f"samples must be positive, got {self.samples}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        for name in ("registration", "latent", "schedule", "training", "guidance", "generator"):
            getattr(self, name)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def sub_seed(seed: int, stream: str) -> int:
    """Independent seed for one named component, derived from the global seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(stream.encode())])
    return int(ss.generate_state(1)[0])


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}")
    return raw


def parse_config(pairs: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply string ``key -> value`` overrides to ``base`` (or the defaults)."""
    unknown = sorted(set(pairs) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    values = {k: _convert(k, v) for k, v in pairs.items()}
    return dataclasses.replace(base or RunConfig(), **values)


def read_pairs(path) -> dict:
    pairs = {}
    offset = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(keepends=True), 1):
        body = line.split("#", 1)[0].strip()
        if body:
            if "=" not in body:
                raise ParseError(f"{path}:{lineno}: expected 'key = value' at byte {offset}",
                                 offset=offset)
            key, value = (s.strip() for s in body.split("=", 1))
            if key in pairs:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            pairs[key] = value
        offset += len(line.encode())
    return pairs


def load_config(path) -> RunConfig:
    return parse_config(read_pairs(path))
