"""DoS paralysis injection.

Each malicious node floods one target, which then does nothing at all for
``paralysis_duration`` epochs.  Attackers act independently, so several can
pick the same target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

POLICIES = ("uniform-any", "leader-focused", "devices-only", "servers-only")


@dataclass(frozen=True)
class AttackConfig:
    num_malicious: int = 0
    target_policy: str = "uniform-any"
    paralysis_duration: int = 1
    reselect_each_epoch: bool = True

    def __post_init__(self):
        if self.num_malicious < 0:
            raise ConfigError("num_malicious must be >= 0")
        if self.target_policy not in POLICIES:
            raise ConfigError(f"unknown target policy {self.target_policy!r}; choose from {POLICIES}")
        if self.paralysis_duration < 1:
            raise ConfigError("paralysis_duration must be >= 1")


def candidate_targets(policy: str, roster: list[str], leader: str | None) -> list[str]:
    """Nodes an attacker may pick under ``policy``.

    Node names starting with ``D`` are devices and ``S`` servers; anything
    else (the single host in monolithic mode) counts as both.
    """
    if policy == "leader-focused":
        if leader is not None and leader in roster:
            return [leader]
        policy = "servers-only"
    if policy == "devices-only":
        pool = [n for n in roster if not n.startswith("S")]
    elif policy == "servers-only":
        pool = [n for n in roster if not n.startswith("D")]
    else:
        pool = list(roster)
    return pool or list(roster)


def choose_targets(config: AttackConfig, rng: np.random.Generator, roster: list[str],
                   leader: str | None = None) -> list[str]:
    """One target per attacker, drawn in attacker order with ``rng.integers``."""
    pool = candidate_targets(config.target_policy, roster, leader)
    return [pool[int(rng.integers(len(pool)))] for _ in range(config.num_malicious)]


class Attack:
    """Tracks who is paralyzed across epochs."""

    def __init__(self, config: AttackConfig, rng_for_epoch):
        self.config = config
        self._rng_for_epoch = rng_for_epoch
        self._expiry: dict[str, int] = {}
        self._fixed: list[str] | None = None
        self._next_strike = 1

    def inject(self, epoch: int, roster: list[str], leader: str | None = None) -> set[str]:
        """Return the nodes paralyzed during ``epoch`` (1-based)."""
        if not roster:
            raise ConfigError("empty node roster")
        self._expiry = {n: e for n, e in self._expiry.items() if e > epoch}
        if self.config.num_malicious and epoch >= self._next_strike:
            if self.config.reselect_each_epoch or self._fixed is None:
                targets = choose_targets(self.config, self._rng_for_epoch(epoch), roster, leader)
                if not self.config.reselect_each_epoch:
                    self._fixed = targets
            else:
                targets = self._fixed
            for t in targets:
                self._expiry[t] = max(self._expiry.get(t, 0), epoch + self.config.paralysis_duration)
            self._next_strike = epoch + self.config.paralysis_duration
        return set(self._expiry)


def inject(config: AttackConfig, epoch: int, rng: np.random.Generator, roster: list[str],
           leader: str | None = None) -> set[str]:
    """Stateless single-epoch injection: the set hit by fresh target choices."""
    if not roster:
        raise ConfigError("empty node roster")
    return set(choose_targets(config, rng, roster, leader))
