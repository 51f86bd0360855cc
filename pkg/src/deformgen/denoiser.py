"""Conditioning embeddings and the fully-connected noise predictor.

A multilayer perceptron ``F`` maps ``[z_tau, image_embed, text_embed,
time_embed]`` through SiLU hidden layers to a vector the size of ``z_tau``.
The noise estimate is preconditioned with the schedule value
``abar = abar_tau``::

    eps_hat = (w * z_tau - sqrt(abar) * F) / sqrt(1 - abar)

with a learned per-coordinate skip gain ``w`` (initialized to 1), so ``F``
plays the role of a clean-latent estimate.  A bare MLP would have to pass
full-rank noise through its narrow hidden layers; the skip path carries it
instead.  All weights zero gives a zero prediction.

Gradients are computed by explicit reverse-mode passes; there is no
autodiff dependency.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError
from .fields import ScalarField
from .spectral import ddx, ddy

__all__ = [
    "Condition",
    "DenoiserParams",
    "image_embedding",
    "text_embedding",
    "time_embedding",
    "make_condition",
    "init_params",
    "predict",
    "Adam",
]

IMAGE_POOL = 16
TEXT_DIM = 64
TIME_DIM = 64
HIDDEN = (512, 512, 512)


def time_embedding(tau, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal embedding of diffusion step(s) ``tau``; shape ``(..., dim)``."""
    tau = np.asarray(tau, dtype=float)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = tau[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def text_embedding(text: str, dim: int = TEXT_DIM) -> np.ndarray:
    """L2-normalized hashed bag of lowercase whitespace tokens."""
    vec = np.zeros(dim)
    for token in text.lower().split():
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        vec[int.from_bytes(digest, "little") % dim] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def image_embedding(template: ScalarField, pool: int = IMAGE_POOL) -> np.ndarray:
    """Central-difference gradient of the template, average-pooled to ``pool x pool``.

    Returns the flattened ``(2, pool, pool)`` array.
    """
    g = template.grid
    if g.nx % pool or g.ny % pool:
        raise ConfigError(f"grid {g.nx}x{g.ny} is not divisible by the pooling size {pool}")
    s = template.values
    grad = np.stack([ddx(s, g.hx), ddy(s, g.hy)])
    by, bx = g.ny // pool, g.nx // pool
    pooled = grad.reshape(2, pool, by, pool, bx).mean(axis=(2, 4))
    return pooled.ravel()


@dataclass(frozen=True)
class Condition:
    image_embed: np.ndarray
    text_embed: np.ndarray
    image_null: bool = False
    text_null: bool = False

    def vector(self) -> np.ndarray:
        """Concatenated embedding with nulled parts zeroed."""
        img = np.zeros_like(self.image_embed) if self.image_null else self.image_embed
        txt = np.zeros_like(self.text_embed) if self.text_null else self.text_embed
        return np.concatenate([img, txt])

    def with_nulls(self, image_null: bool, text_null: bool) -> Condition:
        """Copy with the null flags replaced."""
        return Condition(self.image_embed, self.text_embed, image_null, text_null)

    def masked(self, image_null: bool, text_null: bool) -> Condition:
        """Copy with extra parts nulled; parts already null stay null."""
        return Condition(self.image_embed, self.text_embed,
                         self.image_null or image_null, self.text_null or text_null)

    @property
    def dim(self) -> int:
        return self.image_embed.size + self.text_embed.size


def make_condition(template: ScalarField, text: str, pool: int = IMAGE_POOL,
                   text_dim: int = TEXT_DIM) -> Condition:
    return Condition(image_embedding(template, pool), text_embedding(text, text_dim))


@dataclass
class DenoiserParams:
    """Weights ``W[l]`` of shape ``(fan_in, fan_out)``, biases ``b[l]`` and skip gains.

    The first layer's input is ``[z (data_dim), condition (cond_dim),
    time embedding (time_dim)]``.  ``alpha_bar`` holds the cumulative
    schedule products used for preconditioning (not trained).
    """

    data_dim: int
    cond_dim: int
    time_dim: int
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    skip: np.ndarray = None
    alpha_bar: np.ndarray = None

    def __post_init__(self):
        if self.skip is None:
            self.skip = np.ones(self.data_dim)
        if self.skip.shape != (self.data_dim,):
            raise ShapeError(f"skip gains have shape {self.skip.shape}, expected ({self.data_dim},)")
        if self.alpha_bar is None or np.ndim(self.alpha_bar) != 1:
            raise ShapeError("alpha_bar must be a 1-D array of schedule products")
        widths = [self.data_dim + self.cond_dim + self.time_dim]
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != widths[-1] or b.shape != (W.shape[1],):
                raise ShapeError(f"inconsistent layer shapes {W.shape}, {b.shape}")
            widths.append(W.shape[1])
        if len(self.weights) != len(self.biases) or widths[-1] != self.data_dim:
            raise ShapeError("output width must equal data_dim")

    @property
    def arrays(self) -> list:
        """All trainable arrays in a fixed order (W0, b0, W1, b1, ..., skip)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out + [self.skip]

    def copy(self) -> DenoiserParams:
        return DenoiserParams(self.data_dim, self.cond_dim, self.time_dim,
                              [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                              self.skip.copy(), self.alpha_bar)

    def sq_norm(self) -> float:
        return float(sum(np.sum(a * a) for a in self.arrays))


def init_params(data_dim: int, cond_dim: int, alpha_bar: np.ndarray, rng: np.random.Generator,
                hidden=HIDDEN, time_dim: int = TIME_DIM) -> DenoiserParams:
    """LeCun-normal weights, zero biases, unit skip gains."""
    widths = [data_dim + cond_dim + time_dim, *hidden, data_dim]
    Ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        Ws.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        bs.append(np.zeros(fan_out))
    return DenoiserParams(data_dim, cond_dim, time_dim, Ws, bs, np.ones(data_dim),
                          np.asarray(alpha_bar, dtype=float))


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _first_layer(params, z, cond, temb):
    D, C = params.data_dim, params.cond_dim
    W = params.weights[0]
    return z @ W[:D] + cond @ W[D:D + C] + temb @ W[D + C:] + params.biases[0]


def gains(params: DenoiserParams, tau):
    """Preconditioning factors ``(c_skip, c_out)`` per row, shape ``(B, 1)``."""
    tau = np.asarray(tau, dtype=np.int64).reshape(-1)
    if np.any(tau < 1) or np.any(tau > params.alpha_bar.size):
        raise ShapeError(f"diffusion step outside [1, {params.alpha_bar.size}]")
    ab = params.alpha_bar[tau - 1][:, None]
    inv = 1.0 / np.sqrt(1.0 - ab)
    return inv, -np.sqrt(ab) * inv


def forward(params: DenoiserParams, z, cond, tau):
    """Batched forward pass; returns ``(eps_hat, cache)``.

    ``z``: ``(B, data_dim)``; ``cond``: ``(B, cond_dim)``; ``tau``: ``(B,)``
    or a scalar.
    """
    z = np.atleast_2d(z)
    cond = np.atleast_2d(cond)
    if z.shape[1] != params.data_dim or cond.shape[1] != params.cond_dim:
        raise ShapeError(f"input shapes {z.shape}, {cond.shape} do not match the network")
    tau = np.broadcast_to(tau, (z.shape[0],))
    temb = time_embedding(tau, params.time_dim)
    pre = [_first_layer(params, z, cond, temb)]
    acts = []
    for W, b in zip(params.weights[1:], params.biases[1:]):
        a = _silu(pre[-1])
        acts.append(a)
        pre.append(a @ W + b)
    c_skip, c_out = gains(params, tau)
    out = c_skip * (params.skip * z) + c_out * pre[-1]
    return out, (z, cond, temb, pre, acts, c_skip, c_out)


def predict(params: DenoiserParams, z, cond, tau) -> np.ndarray:
    """Noise prediction for a batch (or a single vector)."""
    out, _ = forward(params, z, cond, tau)
    return out[0] if np.ndim(z) == 1 else out


def backward(params: DenoiserParams, cache, grad_out, need_input=False):
    """Reverse pass.  Returns ``(grads, input_grads)``.

    ``grads`` follows :attr:`DenoiserParams.arrays`; ``input_grads`` is
    ``(d_z, d_cond)`` when ``need_input`` is set, else ``None``.
    """
    z, cond, temb, pre, acts, c_skip, c_out = cache
    n = len(params.weights)
    gW = [None] * n
    gb = [None] * n
    g_skip = np.einsum("bd,bd->d", c_skip * grad_out, z)
    g = c_out * grad_out
    for layer in range(n - 1, 0, -1):
        a = acts[layer - 1]
        gW[layer] = a.T @ g
        gb[layer] = g.sum(axis=0)
        g = (g @ params.weights[layer].T) * _silu_grad(pre[layer - 1])
    inp = np.concatenate([z, cond, temb], axis=1)
    gW[0] = inp.T @ g
    gb[0] = g.sum(axis=0)
    grads = []
    for W, b in zip(gW, gb):
        grads += [W, b]
    grads.append(g_skip)
    input_grads = None
    if need_input:
        gin = g @ params.weights[0].T
        D, C = params.data_dim, params.cond_dim
        input_grads = (gin[:, :D] + c_skip * params.skip * grad_out, gin[:, D:D + C])
    return grads, input_grads


class Adam:
    """Adam with bias correction, updating a :class:`DenoiserParams` in place.

    An L2 penalty ``weight_decay * ||theta||^2`` may be folded into the
    step.  The gradient arrays passed to :meth:`step` are used as scratch
    space and overwritten.
    """

    def __init__(self, params: DenoiserParams, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays]
        self.v = [np.zeros_like(a) for a in params.arrays]
        self.t = 0

    def step(self, params: DenoiserParams, grads, weight_decay: float = 0.0):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        sc2 = np.sqrt(1.0 - self.beta2 ** self.t)
        # lr * (m / c1) / (sqrt(v / c2) + eps), rearranged to save passes
        rate = self.lr * sc2 / c1
        eps = self.eps * sc2
        for a, g, m, v in zip(params.arrays, grads, self.m, self.v):
            if weight_decay:
                g += (2.0 * weight_decay) * a
            m -= g
            m *= self.beta1
            m += g
            g *= g
            v -= g
            v *= self.beta2
            v += g
            np.sqrt(v, out=g)
            g += eps
            np.divide(m, g, out=g)
            g *= rate
            a -= g
