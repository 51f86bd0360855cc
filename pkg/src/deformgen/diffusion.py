"""Denoising diffusion over flattened latent geodesics.

Training follows the usual noise-prediction objective with condition
dropout; sampling is ancestral with classifier-free guidance and a fixed
per-step variance ``sigma_tau**2 = beta_tau``.  Latents are standardized
per coordinate before diffusion, and the statistics travel with the model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from .denoiser import Adam, Condition, DenoiserParams
from .epdiff import GeodesicPath
from .errors import ConfigError, DivergenceError, ShapeError
from .fields import ScalarField, VectorField
from .flow import DeformationPath, det_jacobian, integrate_flow, warp
from .latent import LatentConfig, LatentGeodesic
from .spectral import OperatorConfig

__all__ = [
    "NoiseSchedule",
    "GuidanceConfig",
    "TrainConfig",
    "TrainResult",
    "DiffusionModel",
    "SampleResult",
    "forward_diffuse",
    "denoise_predict",
    "cfg_predict",
    "train",
    "train_arrays",
    "sample",
    "sample_many",
    "sample_batch",
    "sample_latents",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; step indices run over ``1..T``."""

    T: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"T must be a positive integer, got {self.T!r}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")

    @property
    def beta(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.beta)

    def check_step(self, tau):
        tau = np.asarray(tau)
        if np.any(tau < 1) or np.any(tau > self.T) or np.any(tau != np.round(tau)):
            raise ConfigError(f"diffusion step must be an integer in [1, {self.T}]")


@dataclass(frozen=True)
class GuidanceConfig:
    delta_i: float = 1.5
    delta_t: float = 2.0

    def __post_init__(self):
        if not (np.isfinite(self.delta_i) and np.isfinite(self.delta_t)):
            raise ConfigError("guidance scales must be finite")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 36
    weight_decay: float = 1e-4
    epochs: int = 100
    p_uncond: float = 0.1
    seed: int = 0
    val_size: int = 64
    hidden: tuple = dn.HIDDEN

    def __post_init__(self):
        if not (self.lr >= 0 and self.weight_decay >= 0):
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.val_size < 1:
            raise ConfigError("batch_size and val_size must be positive, epochs non-negative")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")


def forward_diffuse(z0: np.ndarray, tau, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_tau) z0 + sqrt(1 - abar_tau) eps`` (``tau`` may be a batch)."""
    if np.shape(z0) != np.shape(eps):
        raise ShapeError(f"noise shape {np.shape(eps)} does not match {np.shape(z0)}")
    sched.check_step(tau)
    ab = sched.alpha_bar[np.asarray(tau, dtype=np.int64) - 1]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(z0) - np.ndim(ab)))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def denoise_predict(z_tau: np.ndarray, cond: Condition, tau: int, params: DenoiserParams) -> np.ndarray:
    """Noise prediction for one latent under ``cond`` (null flags applied)."""
    return dn.predict(params, z_tau, cond.vector(), tau)


def cfg_predict(z_tau: np.ndarray, cond: Condition, tau: int, params: DenoiserParams,
                g: GuidanceConfig) -> np.ndarray:
    """Guided prediction ``(1-dI) Z(0,0) + (dI-dT) Z(img,0) + dT Z(img,txt)``.

    Parts of ``cond`` that are already null stay null in all three terms.
    """
    z_unc = denoise_predict(z_tau, cond.masked(True, True), tau, params)
    z_img = denoise_predict(z_tau, cond.masked(False, True), tau, params)
    z_full = denoise_predict(z_tau, cond.masked(False, False), tau, params)
    return (1.0 - g.delta_i) * z_unc + (g.delta_i - g.delta_t) * z_img + g.delta_t * z_full


# ----------------------------------------------------------------------------
# model bundle

@dataclass
class DiffusionModel:
    """Everything needed to sample: network, schedule, latent layout and scaling.

    ``mean`` and ``scale`` standardize flattened latent geodesics:
    the network sees ``(z - mean) / scale``.
    """

    params: DenoiserParams
    schedule: NoiseSchedule
    latent: LatentConfig
    steps: int
    operator: OperatorConfig
    mean: np.ndarray
    scale: np.ndarray
    image_dim: int
    text_dim: int

    def __post_init__(self):
        D = (self.steps + 1) * self.latent.latent_dim
        if self.params.data_dim != D:
            raise ShapeError(f"network data dim {self.params.data_dim} != latent geodesic dim {D}")
        if self.params.cond_dim != self.image_dim + self.text_dim:
            raise ShapeError("network condition dim does not match the embeddings")
        if self.mean.shape != (D,) or self.scale.shape != (D,):
            raise ShapeError("normalization vectors have the wrong length")
        if not np.all(self.scale > 0):
            raise ConfigError("normalization scales must be positive")

    @property
    def data_dim(self) -> int:
        return self.params.data_dim

    def condition(self, template: ScalarField, text: str) -> Condition:
        if template.grid != self.latent.grid:
            raise ShapeError(f"template grid {template.grid} does not match model grid {self.latent.grid}")
        pool = int(round(np.sqrt(self.image_dim // 2)))
        return dn.make_condition(template, text, pool, self.text_dim)


# ----------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: DenoiserParams
    loss_log: list  # (step, mean squared error of the batch)
    val_start: float
    val_end: float
    optimizer: Adam = field(repr=False, default=None)

    @property
    def val_decreased(self) -> bool:
        return self.val_end < self.val_start


def _drop_conditions(cond, image_dim, p, rng):
    """Independently zero the image and text parts of each row with probability ``p``."""
    cond = cond.copy()
    n = cond.shape[0]
    cond[rng.random(n) < p, :image_dim] = 0.0
    cond[rng.random(n) < p, image_dim:] = 0.0
    return cond


def _batch_loss(params, z0, cond, tau, eps, sched, weight_decay=0.0, grad=True):
    zt = forward_diffuse(z0, tau, eps, sched)
    out, cache = dn.forward(params, zt, cond, tau)
    r = out - eps
    mse = float(np.mean(r * r))
    if not grad:
        return mse, None
    gout = (2.0 / r.size) * r
    grads, _ = dn.backward(params, cache, gout)
    if weight_decay:
        for gr, a in zip(grads, params.arrays):
            gr += (2.0 * weight_decay) * a
    return mse, grads


def train_arrays(Z: np.ndarray, cond: np.ndarray, image_dim: int, sched: NoiseSchedule,
                 hyper: TrainConfig, params: DenoiserParams | None = None,
                 optimizer: Adam | None = None) -> TrainResult:
    """Train on already-standardized flat latents ``Z`` with condition rows ``cond``.

    Objective per batch: ``mean (eps - Z_theta(z_tau, c, tau))**2 +
    weight_decay * ||theta||^2``.  The logged loss is the first term.
    ``image_dim`` splits ``cond`` into the image and text parts that are
    dropped independently.
    """
    Z = np.asarray(Z, dtype=float)
    cond = np.asarray(cond, dtype=float)
    if Z.ndim != 2 or cond.ndim != 2 or cond.shape[0] != Z.shape[0]:
        raise ShapeError(f"incompatible training arrays {Z.shape}, {cond.shape}")
    n, D = Z.shape
    init_rng, val_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(hyper.seed).spawn(2))
    # a resumed run continues with a fresh stream keyed by the optimizer step
    step0 = optimizer.t if optimizer is not None else 0
    train_rng = np.random.default_rng([hyper.seed, step0])
    if params is None:
        params = dn.init_params(D, cond.shape[1], sched.alpha_bar, init_rng, hyper.hidden)
    else:
        params = params.copy()
    if params.data_dim != D or params.cond_dim != cond.shape[1]:
        raise ShapeError("initial parameters do not match the data")
    if not np.array_equal(params.alpha_bar, sched.alpha_bar):
        raise ConfigError("initial parameters were built for a different noise schedule")
    opt = optimizer or Adam(params, lr=hyper.lr)
    opt.lr = hyper.lr

    # frozen validation batch
    vi = val_rng.integers(0, n, hyper.val_size)
    v_tau = val_rng.integers(1, sched.T + 1, hyper.val_size)
    v_eps = val_rng.standard_normal((hyper.val_size, D))
    v_cond = _drop_conditions(cond[vi], image_dim, hyper.p_uncond, val_rng)

    def val_loss():
        return _batch_loss(params, Z[vi], v_cond, v_tau, v_eps, sched, grad=False)[0]

    val_start = val_loss()
    loss_log = []
    step = opt.t
    bs = min(hyper.batch_size, n)
    for _ in range(hyper.epochs):
        order = train_rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            tau = train_rng.integers(1, sched.T + 1, idx.size)
            eps = train_rng.standard_normal((idx.size, D))
            c = _drop_conditions(cond[idx], image_dim, hyper.p_uncond, train_rng)
            loss, grads = _batch_loss(params, Z[idx], c, tau, eps, sched)
            step += 1
            if not np.isfinite(loss):
                raise DivergenceError(f"training loss became {loss} at step {step}", step=step)
            opt.step(params, grads, hyper.weight_decay)
            loss_log.append((step, loss))
    val_end = val_loss()
    log.info("validation loss %.6g -> %.6g over %d steps", val_start, val_end, len(loss_log))
    return TrainResult(params, loss_log, val_start, val_end, opt)


def standardize(Z: np.ndarray, floor: float = 1e-3):
    """Per-coordinate mean and scale of the rows of ``Z``.

    Scales below ``floor`` times the largest one are clamped so that nearly
    constant coordinates do not blow up.
    """
    mean = Z.mean(axis=0)
    scale = Z.std(axis=0) if Z.shape[0] > 1 else np.ones(Z.shape[1])
    top = scale.max() if scale.size and scale.max() > 0 else 1.0
    return mean, np.maximum(scale, floor * top)


def train(dataset, sched: NoiseSchedule, hyper: TrainConfig, operator: OperatorConfig,
          model: DiffusionModel | None = None, optimizer: Adam | None = None):
    """Train a conditional model on ``(LatentGeodesic, template, text)`` triples.

    Starting from ``model`` (resume) keeps its normalization; otherwise the
    statistics are estimated from ``dataset``.  Returns
    ``(DiffusionModel, TrainResult)``.
    """
    if not dataset:
        raise ConfigError("empty training set")
    latents = [lg for lg, _, _ in dataset]
    cfg, steps = latents[0].config, latents[0].steps
    if any(lg.config != cfg or lg.steps != steps for lg in latents):
        raise ShapeError("dataset latents must share their configuration and step count")
    conds = [dn.make_condition(tpl, text) for _, tpl, text in dataset]
    image_dim = conds[0].image_embed.size
    text_dim = conds[0].text_embed.size
    Z = np.stack([lg.flat() for lg in latents])
    C = np.stack([c.vector() for c in conds])
    if model is None:
        mean, scale = standardize(Z)
        params = None
    else:
        mean, scale, params = model.mean, model.scale, model.params
    result = train_arrays((Z - mean) / scale, C, image_dim, sched, hyper, params, optimizer)
    out = DiffusionModel(result.params, sched, cfg, steps, operator, mean, scale, image_dim, text_dim)
    return out, result


# ----------------------------------------------------------------------------
# sampling

_NOISE_BUDGET = 1 << 23  # doubles of pre-drawn noise


class _GuidedNet:
    """Classifier-free guided predictor with the condition projections cached.

    The three evaluations share ``z W_z``; since the output layer is affine,
    combining the last hidden activations before it gives the same linear
    combination of the three network outputs.  ``conds`` holds one
    condition per batch row.
    """

    def __init__(self, params: DenoiserParams, conds, g: GuidanceConfig | None):
        D, C = params.data_dim, params.cond_dim
        W0 = params.weights[0]
        self.params = params
        self.Wz, self.Wt = W0[:D], W0[D + C:]
        if g is None:  # fully conditional only
            nulls = [((False, False), 1.0)]
        else:
            nulls = [((True, True), 1.0 - g.delta_i),
                     ((False, True), g.delta_i - g.delta_t),
                     ((False, False), g.delta_t)]
        self.proj = []
        for flags, _ in nulls:
            cvec = np.stack([c.masked(*flags).vector() for c in conds]).reshape(len(conds), C)
            self.proj.append(cvec @ W0[D:D + C] + params.biases[0])
        self.coef = [w for _, w in nulls]

    def __call__(self, z: np.ndarray, tau: int) -> np.ndarray:
        p = self.params
        temb = dn.time_embedding(float(tau), p.time_dim)
        base = z @ self.Wz + temb @ self.Wt
        mixed = 0.0
        for proj, w in zip(self.proj, self.coef):
            a = dn._silu(base + proj)
            for W, b in zip(p.weights[1:-1], p.biases[1:-1]):
                a = dn._silu(a @ W + b)
            mixed = mixed + w * a
        total = sum(self.coef)
        c_skip, c_out = dn.gains(p, tau)
        F = mixed @ p.weights[-1] + total * p.biases[-1]
        return (total * c_skip) * (p.skip * z) + c_out * F


def sample_latents(model: DiffusionModel, cond, g: GuidanceConfig | None,
                   seeds) -> np.ndarray:
    """Ancestral sampling for each seed; returns de-standardized flat latents.

    ``cond`` is one :class:`Condition` shared by all seeds or a sequence
    with one condition per seed.  Each seed owns a generator that draws
    ``z_T`` first and then one noise vector per step for ``tau = T .. 2``.
    ``g = None`` samples from the fully conditional predictor without
    guidance.
    """
    seeds = list(seeds)
    D = model.data_dim
    sched = model.schedule
    beta, abar = sched.beta, sched.alpha_bar
    rngs = [np.random.default_rng(s) for s in seeds]
    z = np.stack([r.standard_normal(D) for r in rngs]) if seeds else np.zeros((0, D))
    conds = [cond] * len(seeds) if isinstance(cond, Condition) else list(cond)
    if len(conds) != len(seeds):
        raise ShapeError(f"{len(conds)} conditions for {len(seeds)} seeds")
    net = _GuidedNet(model.params, conds, g)
    # noise is drawn per seed in blocks of steps; a block of draws yields the
    # same stream as consecutive single draws
    block = max(1, min(sched.T, _NOISE_BUDGET // max(1, D * len(seeds))))
    noise, k = None, block
    for tau in range(sched.T, 0, -1):
        b = beta[tau - 1]
        eps = net(z, tau)
        z = (z - (b / np.sqrt(1.0 - abar[tau - 1])) * eps) / np.sqrt(1.0 - b)
        if tau > 1:
            if k == block:
                n = min(block, tau - 1)
                noise = np.stack([r.standard_normal((n, D)) for r in rngs], axis=1)
                k = 0
            z = z + np.sqrt(b) * noise[k]
            k += 1
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"sampling produced non-finite latents at step {tau}", step=tau)
    return z * model.scale + model.mean


@dataclass
class SampleResult:
    seed: int
    latent: LatentGeodesic
    path: GeodesicPath
    deformation: DeformationPath
    frames: list
    detjac: ScalarField

    @property
    def min_detjac(self) -> float:
        return float(self.detjac.values.min())


def _realize(model, template, flat, seed):
    lg = LatentGeodesic.from_flat(model.latent, flat)
    vel = lg.velocities()
    grid = model.latent.grid
    path = GeodesicPath(tuple(VectorField(grid, v) for v in vel), model.operator)
    deformation = integrate_flow(path)
    frames = [warp(template, phi) for phi in deformation.deformations]
    return SampleResult(seed, lg, path, deformation, frames, det_jacobian(deformation.final))


def sample_many(template: ScalarField, text: str, model: DiffusionModel,
                g: GuidanceConfig | None, seeds) -> list[SampleResult]:
    """Sample one deformation per seed (batched through the network)."""
    cond = model.condition(template, text)
    seeds = list(seeds)
    flats = sample_latents(model, cond, g, seeds)
    return [_realize(model, template, f, s) for f, s in zip(flats, seeds)]


def sample_batch(requests, model: DiffusionModel, g: GuidanceConfig | None) -> list[SampleResult]:
    """Sample one deformation per ``(template, text, seed)`` request in a single batch."""
    requests = list(requests)
    conds = [model.condition(tpl, text) for tpl, text, _ in requests]
    flats = sample_latents(model, conds, g, [s for _, _, s in requests])
    return [_realize(model, tpl, f, s) for f, (tpl, _, s) in zip(flats, requests)]


def sample(template: ScalarField, text: str, model: DiffusionModel,
           g: GuidanceConfig | None, seed: int) -> SampleResult:
    """Sample a latent geodesic, flow it and warp ``template`` along it."""
    return sample_many(template, text, model, g, [seed])[0]
