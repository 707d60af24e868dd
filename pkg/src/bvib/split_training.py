"""Device/server split of one VIB model, exchanging latent stats and gradients.

The device owns the encoder and sends ``(mu, log sigma^2)`` plus labels over
an ideal channel.  The server samples epsilon from its own stream, runs the
decoder, evaluates the bound, updates the decoder with Adam, logs the two
information values to its ledger and returns the gradient with respect to
the latent statistics.  The device then backpropagates that gradient through
its encoder and takes its own Adam step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError
from .ledger_chain import LedgerEntry
from .numerics import AdamState, FlopCounter
from .vib_model import (
    DecoderParams,
    EncoderCache,
    EncoderParams,
    LatentStats,
    LossBreakdown,
    encoder_backward,
    encoder_forward,
    server_objective,
)


@dataclass
class StatsMessage:
    """Device -> server payload."""

    pair_id: int
    epoch: int
    batch: int
    stats: LatentStats
    labels: np.ndarray


@dataclass
class SplitGradMessage:
    """Server -> device payload: gradients of ``-L`` w.r.t. the latent stats."""

    pair_id: int
    epoch: int
    batch: int
    d_mu: np.ndarray
    d_logvar: np.ndarray


@dataclass
class PairState:
    pair_id: int
    device_id: str
    server_id: str
    enc: EncoderParams
    dec: DecoderParams
    eps_rng: np.random.Generator
    lr: float = 1e-3
    beta: float = 1e-3
    paper_literal: bool = False
    enc_adam: dict[str, AdamState] = field(default=None)
    dec_adam: dict[str, AdamState] = field(default=None)
    # device-side memory of the last forward, needed for backward
    _pending: tuple[int, int, EncoderCache, LatentStats] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.enc.latent_dim != self.dec.latent_dim:
            raise ConfigError(f"encoder latent {self.enc.latent_dim} != decoder input {self.dec.latent_dim}")
        if self.enc_adam is None:
            self.enc_adam = self.enc.adam_states()
        if self.dec_adam is None:
            self.dec_adam = self.dec.adam_states()

    def snapshot(self) -> dict:
        """Copy of everything a training round mutates, for rollback."""
        return {
            "enc": self.enc.copy(),
            "dec": self.dec.copy(),
            "enc_adam": {k: s.copy() for k, s in self.enc_adam.items()},
            "dec_adam": {k: s.copy() for k, s in self.dec_adam.items()},
            "eps_state": self.eps_rng.bit_generator.state,
        }

    def restore(self, snap: dict) -> None:
        self.enc = snap["enc"].copy()
        self.dec = snap["dec"].copy()
        self.enc_adam = {k: s.copy() for k, s in snap["enc_adam"].items()}
        self.dec_adam = {k: s.copy() for k, s in snap["dec_adam"].items()}
        self.eps_rng.bit_generator.state = snap["eps_state"]
        self._pending = None


def device_forward(pair: PairState, x, labels, epoch: int, batch: int,
                   device_alive: bool = True, counter: FlopCounter | None = None) -> StatsMessage | None:
    """Encode a batch on the device.  A paralyzed device sends nothing."""
    if not device_alive:
        pair._pending = None
        return None
    stats, cache = encoder_forward(pair.enc, x, counter, pair.device_id)
    pair._pending = (epoch, batch, cache, stats)
    return StatsMessage(pair.pair_id, epoch, batch, stats, np.asarray(labels).reshape(-1).copy())


def server_step(pair: PairState, msg: StatsMessage, server_alive: bool = True,
                counter: FlopCounter | None = None):
    """Decode, score and update on the server.

    Returns ``(breakdown, grad_message, ledger_entry)``, or ``None`` when the
    server is paralyzed.  The ledger entry's timestamp is left at 0 for the
    caller to stamp with the round counter.
    """
    if not server_alive:
        return None
    if msg.pair_id != pair.pair_id:
        raise ProtocolError(f"pair {pair.pair_id} received stats addressed to pair {msg.pair_id}")
    eps = pair.eps_rng.standard_normal(msg.stats.mu.shape)
    breakdown, dec_grads, d_mu, d_lv, _ = server_objective(
        pair.dec, msg.stats, eps, msg.labels, pair.beta, pair.paper_literal, counter, pair.server_id
    )
    pair.dec.apply_adam(dec_grads, pair.dec_adam, pair.lr)
    grad_msg = SplitGradMessage(pair.pair_id, msg.epoch, msg.batch, d_mu, d_lv)
    entry = LedgerEntry(msg.epoch, msg.batch, pair.pair_id, breakdown.mi_upper_bits, breakdown.mi_lower_bits, 0)
    return breakdown, grad_msg, entry


def device_backward(pair: PairState, msg: SplitGradMessage, counter: FlopCounter | None = None) -> None:
    if pair._pending is None:
        raise ProtocolError(f"pair {pair.pair_id}: gradient received with no outstanding forward")
    epoch, batch, cache, stats = pair._pending
    if (msg.pair_id, msg.epoch, msg.batch) != (pair.pair_id, epoch, batch):
        raise ProtocolError(
            f"pair {pair.pair_id}: stale gradient for epoch {msg.epoch} batch {msg.batch}, "
            f"expected epoch {epoch} batch {batch}"
        )
    if msg.d_mu.shape != stats.mu.shape or msg.d_logvar.shape != stats.logvar.shape:
        raise ProtocolError(f"pair {pair.pair_id}: gradient shape does not match forward stats")
    grads = encoder_backward(pair.enc, cache, msg.d_mu, msg.d_logvar, counter, pair.device_id)
    pair.enc.apply_adam(grads, pair.enc_adam, pair.lr)
    pair._pending = None


def train_pair_batch(pair: PairState, x, labels, epoch: int, batch: int,
                     counter: FlopCounter | None = None) -> tuple[LossBreakdown, LedgerEntry]:
    """The full device -> server -> device exchange for one batch."""
    msg = device_forward(pair, x, labels, epoch, batch, True, counter)
    breakdown, grad_msg, entry = server_step(pair, msg, True, counter)
    device_backward(pair, grad_msg, counter)
    return breakdown, entry
