"""Variational information bottleneck encoder/decoder with explicit gradients.

Encoder (device side): ``x -> ReLU(trunk) -> (mu head, log-variance head)``.
Decoder (server side): ``z -> ReLU(hidden) -> logits -> log-softmax``.

The prior/variational marginal over the latent is a fixed ``N(0, I)``.  The
training objective maximised is

    L = mean log2 q(y | z_hat) - beta * mean KL(N(mu, sigma^2) || N(0, I)) / ln 2

and the optimiser minimises ``-L``.  All information quantities are per-sample
averages in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .numerics import (
    DTYPE,
    AdamState,
    FlopCounter,
    adam_step,
    check_finite,
    dense_backward,
    dense_forward,
    init_dense,
    relu,
    relu_backward,
    softmax_log_probs,
)

LN2 = math.log(2.0)
LOG2_CLASSES = math.log2(10)
CHECKPOINT_VERSION = 1


class _Params:
    """Mixin for dataclasses whose fields are all float64 arrays."""

    def named(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.named().items()})

    def adam_states(self) -> dict[str, AdamState]:
        return {k: AdamState.like(v) for k, v in self.named().items()}

    def apply_adam(self, grads: dict[str, np.ndarray], states: dict[str, AdamState], lr: float) -> None:
        for name, param in self.named().items():
            adam_step(param, grads[name], states[name], lr)

    def num_params(self) -> int:
        return sum(v.size for v in self.named().values())


@dataclass
class EncoderParams(_Params):
    W1: np.ndarray
    b1: np.ndarray
    W_mu: np.ndarray
    b_mu: np.ndarray
    W_lv: np.ndarray
    b_lv: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int = 784, hidden: int = 1024, latent: int = 512):
        W1, b1 = init_dense(rng, in_dim, hidden)
        W_mu, b_mu = init_dense(rng, hidden, latent)
        W_lv, b_lv = init_dense(rng, hidden, latent)
        return cls(W1, b1, W_mu, b_mu, W_lv, b_lv)

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, latent: int):
        z = lambda *s: np.zeros(s, dtype=DTYPE)  # noqa: E731
        return cls(z(hidden, in_dim), z(hidden), z(latent, hidden), z(latent), z(latent, hidden), z(latent))

    @property
    def latent_dim(self) -> int:
        return self.W_mu.shape[0]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [self.W1.shape, self.W_mu.shape, self.W_lv.shape]


@dataclass
class DecoderParams(_Params):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, latent: int = 512, hidden: int = 784, classes: int = 10):
        W1, b1 = init_dense(rng, latent, hidden)
        W2, b2 = init_dense(rng, hidden, classes)
        return cls(W1, b1, W2, b2)

    @classmethod
    def zeros(cls, latent: int, hidden: int, classes: int = 10):
        z = lambda *s: np.zeros(s, dtype=DTYPE)  # noqa: E731
        return cls(z(hidden, latent), z(hidden), z(classes, hidden), z(classes))

    @property
    def latent_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [self.W1.shape, self.W2.shape]


@dataclass
class LatentStats:
    """Per-sample Gaussian parameters, each of shape ``(M, K)``."""

    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=DTYPE))
        self.logvar = np.atleast_2d(np.asarray(self.logvar, dtype=DTYPE))
        if self.mu.shape != self.logvar.shape:
            raise ConfigError(f"mu{self.mu.shape} and logvar{self.logvar.shape} differ")

    @property
    def batch_size(self) -> int:
        return self.mu.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar)


@dataclass
class LossBreakdown:
    mi_lower_bits: float
    mi_upper_bits: float
    loss: float
    beta: float

    @property
    def objective(self) -> float:
        """The maximised quantity, ``mi_lower - beta * mi_upper``."""
        return self.mi_lower_bits - self.beta * self.mi_upper_bits

    @property
    def reported_mi_lower_bits(self) -> float:
        return self.mi_lower_bits + LOG2_CLASSES


@dataclass
class EncoderCache:
    x: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray


@dataclass
class DecoderCache:
    z: np.ndarray
    a_pre: np.ndarray
    a: np.ndarray
    log_q: np.ndarray


# -- encoder -----------------------------------------------------------------


def encoder_forward(enc: EncoderParams, x, counter: FlopCounter | None = None, node: str = ""):
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    h_pre = dense_forward(enc.W1, enc.b1, x, counter, node)
    h = relu(h_pre)
    mu = dense_forward(enc.W_mu, enc.b_mu, h, counter, node)
    logvar = dense_forward(enc.W_lv, enc.b_lv, h, counter, node)
    check_finite(mu, "encoder mean")
    check_finite(logvar, "encoder log-variance")
    return LatentStats(mu, logvar), EncoderCache(x, h_pre, h)


def encode(enc: EncoderParams, x, counter: FlopCounter | None = None, node: str = "") -> LatentStats:
    return encoder_forward(enc, x, counter, node)[0]


def encoder_backward(enc: EncoderParams, cache: EncoderCache, d_mu, d_logvar,
                     counter: FlopCounter | None = None, node: str = "") -> dict[str, np.ndarray]:
    dW_mu, db_mu, dh_mu = dense_backward(enc.W_mu, cache.h, d_mu, counter, node)
    dW_lv, db_lv, dh_lv = dense_backward(enc.W_lv, cache.h, d_logvar, counter, node)
    dh_pre = relu_backward(cache.h_pre, dh_mu + dh_lv)
    dW1, db1, _ = dense_backward(enc.W1, cache.x, dh_pre, counter, node)
    return {"W1": dW1, "b1": db1, "W_mu": dW_mu, "b_mu": db_mu, "W_lv": dW_lv, "b_lv": db_lv}


# -- latent sampling and information terms -------------------------------------


def _noise_scale(logvar: np.ndarray, paper_literal: bool) -> np.ndarray:
    # paper_literal multiplies epsilon by the variance instead of the std-dev
    return np.exp(logvar) if paper_literal else np.exp(0.5 * logvar)


def _match_eps(stats: LatentStats, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=DTYPE)
    if eps.size != stats.mu.size:
        raise ConfigError(f"epsilon of size {eps.size} does not match latent shape {stats.mu.shape}")
    return eps.reshape(stats.mu.shape)


def reparameterize(stats: LatentStats, eps, paper_literal: bool = False) -> np.ndarray:
    return stats.mu + _match_eps(stats, eps) * _noise_scale(stats.logvar, paper_literal)


def reparameterize_backward(stats: LatentStats, eps, d_z, paper_literal: bool = False):
    """Map ``dL/dz_hat`` to ``(dL/dmu, dL/dlogvar)``."""
    eps = _match_eps(stats, eps)
    scale = _noise_scale(stats.logvar, paper_literal)
    dscale_dlv = scale if paper_literal else 0.5 * scale
    return d_z, d_z * eps * dscale_dlv


def kl_nats(stats: LatentStats) -> np.ndarray:
    """Closed-form KL(N(mu, diag var) || N(0, I)) per sample, in nats."""
    return 0.5 * np.sum(stats.mu**2 + np.exp(stats.logvar) - 1.0 - stats.logvar, axis=1)


def mi_upper_bits(stats: LatentStats) -> float:
    return float(np.mean(kl_nats(stats)) / LN2)


def mi_lower_bits(log_q, labels) -> float:
    log_q = np.atleast_2d(np.asarray(log_q, dtype=DTYPE))
    labels = np.asarray(labels).reshape(-1)
    if labels.size != log_q.shape[0]:
        raise ConfigError(f"{labels.size} labels for {log_q.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= log_q.shape[1]):
        raise ConfigError(f"label out of range [0, {log_q.shape[1] - 1}]")
    picked = log_q[np.arange(labels.size), labels]
    return float(np.mean(picked) / LN2)


def vib_loss(mi_lower: float, mi_upper: float, beta: float) -> LossBreakdown:
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    return LossBreakdown(mi_lower, mi_upper, -(mi_lower - beta * mi_upper), beta)


# -- decoder -----------------------------------------------------------------


def decoder_forward(dec: DecoderParams, z, counter: FlopCounter | None = None, node: str = ""):
    z = np.atleast_2d(np.asarray(z, dtype=DTYPE))
    a_pre = dense_forward(dec.W1, dec.b1, z, counter, node)
    a = relu(a_pre)
    logits = dense_forward(dec.W2, dec.b2, a, counter, node)
    log_q = softmax_log_probs(logits)
    check_finite(log_q, "decoder log-probabilities")
    return log_q, DecoderCache(z, a_pre, a, log_q)


def decoder_backward(dec: DecoderParams, cache: DecoderCache, d_logits,
                     counter: FlopCounter | None = None, node: str = ""):
    """Return ``(grads, dL/dz)`` given ``dL/dlogits``."""
    dW2, db2, da = dense_backward(dec.W2, cache.a, d_logits, counter, node)
    da_pre = relu_backward(cache.a_pre, da)
    dW1, db1, dz = dense_backward(dec.W1, cache.z, da_pre, counter, node)
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}, dz


def xent_logit_grad(log_q: np.ndarray, labels) -> np.ndarray:
    """d/dlogits of ``-mean log2 q(y|z)``."""
    labels = np.asarray(labels).reshape(-1)
    g = np.exp(log_q)
    g[np.arange(labels.size), labels] -= 1.0
    return g / (labels.size * LN2)


def kl_grads(stats: LatentStats, beta: float):
    """d/dmu and d/dlogvar of ``beta * mean KL / ln 2``."""
    scale = beta / (stats.batch_size * LN2)
    return scale * stats.mu, scale * 0.5 * (np.exp(stats.logvar) - 1.0)


def server_objective(dec: DecoderParams, stats: LatentStats, eps, labels, beta: float,
                     paper_literal: bool = False, counter: FlopCounter | None = None, node: str = ""):
    """Everything the decoder host computes for one batch.

    Returns ``(breakdown, decoder_grads, d_mu, d_logvar, log_q)`` where the
    two latent gradients are those of ``-L`` and include the KL term.
    """
    z_hat = reparameterize(stats, eps, paper_literal)
    log_q, cache = decoder_forward(dec, z_hat, counter, node)
    breakdown = vib_loss(mi_lower_bits(log_q, labels), mi_upper_bits(stats), beta)
    if not math.isfinite(breakdown.loss):
        raise NumericError("non-finite VIB loss")
    dec_grads, d_z = decoder_backward(dec, cache, xent_logit_grad(log_q, labels), counter, node)
    d_mu, d_lv = reparameterize_backward(stats, eps, d_z, paper_literal)
    k_mu, k_lv = kl_grads(stats, beta)
    return breakdown, dec_grads, d_mu + k_mu, d_lv + k_lv, log_q


# -- single-host model ---------------------------------------------------------


@dataclass
class VIBModel:
    """Encoder and decoder trained together on one host."""

    enc: EncoderParams
    dec: DecoderParams
    beta: float = 1e-3
    lr: float = 1e-3
    paper_literal: bool = False

    def __post_init__(self):
        if self.enc.latent_dim != self.dec.latent_dim:
            raise ConfigError(f"encoder latent {self.enc.latent_dim} != decoder input {self.dec.latent_dim}")
        self.enc_adam = self.enc.adam_states()
        self.dec_adam = self.dec.adam_states()

    def gradients(self, x, labels, eps, counter: FlopCounter | None = None, node: str = ""):
        """Forward and backward through the whole chain in one pass."""
        labels = np.asarray(labels).reshape(-1)
        x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
        eps = np.asarray(eps, dtype=DTYPE)
        e = self.enc
        d = self.dec
        M = x.shape[0]

        h_pre = dense_forward(e.W1, e.b1, x, counter, node)
        h = relu(h_pre)
        mu = dense_forward(e.W_mu, e.b_mu, h, counter, node)
        lv = dense_forward(e.W_lv, e.b_lv, h, counter, node)
        scale = np.exp(lv) if self.paper_literal else np.exp(0.5 * lv)
        z = mu + eps * scale
        a_pre = dense_forward(d.W1, d.b1, z, counter, node)
        a = relu(a_pre)
        log_q = softmax_log_probs(dense_forward(d.W2, d.b2, a, counter, node))
        check_finite(log_q, "decoder log-probabilities")

        rows = np.arange(M)
        lower = float(np.mean(log_q[rows, labels]) / LN2)
        upper = float(np.mean(0.5 * np.sum(mu**2 + np.exp(lv) - 1.0 - lv, axis=1)) / LN2)
        breakdown = vib_loss(lower, upper, self.beta)

        g_logits = np.exp(log_q)
        g_logits[rows, labels] -= 1.0
        g_logits /= M * LN2
        dW2, db2, g_a = dense_backward(d.W2, a, g_logits, counter, node)
        g_a_pre = relu_backward(a_pre, g_a)
        dD1, dc1, g_z = dense_backward(d.W1, z, g_a_pre, counter, node)

        c = self.beta / (M * LN2)
        g_mu = g_z + c * mu
        dscale = scale if self.paper_literal else 0.5 * scale
        g_lv = g_z * eps * dscale + c * 0.5 * (np.exp(lv) - 1.0)
        dWmu, dbmu, gh_mu = dense_backward(e.W_mu, h, g_mu, counter, node)
        dWlv, dblv, gh_lv = dense_backward(e.W_lv, h, g_lv, counter, node)
        g_h_pre = relu_backward(h_pre, gh_mu + gh_lv)
        dW1, db1, _ = dense_backward(e.W1, x, g_h_pre, counter, node)

        enc_grads = {"W1": dW1, "b1": db1, "W_mu": dWmu, "b_mu": dbmu, "W_lv": dWlv, "b_lv": dblv}
        dec_grads = {"W1": dD1, "b1": dc1, "W2": dW2, "b2": db2}
        return breakdown, enc_grads, dec_grads, log_q

    def train_step(self, x, labels, eps, counter: FlopCounter | None = None, node: str = "") -> LossBreakdown:
        breakdown, enc_grads, dec_grads, _ = self.gradients(x, labels, eps, counter, node)
        self.dec.apply_adam(dec_grads, self.dec_adam, self.lr)
        self.enc.apply_adam(enc_grads, self.enc_adam, self.lr)
        return breakdown


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, enc: EncoderParams | None = None, dec: DecoderParams | None = None) -> Path:
    """Write parameters to an uncompressed ``.npz`` archive.

    Keys are ``encoder/<name>`` and ``decoder/<name>`` holding float64
    arrays with their shapes, plus ``format_version``.  ``np.savez`` stores
    raw IEEE-754 bytes, so a load returns bit-identical arrays.
    """
    arrays = {"format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64)}
    if enc is not None:
        arrays.update({f"encoder/{k}": v for k, v in enc.named().items()})
    if dec is not None:
        arrays.update({f"decoder/{k}": v for k, v in dec.named().items()})
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[EncoderParams | None, DecoderParams | None]:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        enc = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("encoder/")}
        dec = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("decoder/")}
    return (EncoderParams(**enc) if enc else None, DecoderParams(**dec) if dec else None)
