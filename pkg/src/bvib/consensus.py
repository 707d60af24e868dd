"""Raft-lite role machine for the server cluster.

Simplifications relative to full Raft, matching the scheme being simulated:
every alive server stands as a candidate in an election, each casts one
uniformly random vote (self-votes allowed), and the plurality winner leads
with ties going to the lowest node id.  There is no log replication; the
leader assembles follower ledgers into a block and broadcasts it.

Everything advances at round boundaries from a single control thread.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AuthorizationError, ConfigError, TotalFailure
from .ledger_chain import Block, Chain, LedgerEntry, append_block, reconcile


class Role(str, enum.Enum):
    LEADER = "leader"
    FOLLOWER = "follower"
    CANDIDATE = "candidate"


@dataclass(frozen=True)
class TermConfig:
    term_length: int = 600
    heartbeat_interval: int = 1
    missed_heartbeat_threshold: int = 3

    def __post_init__(self):
        if self.term_length < 1 or self.heartbeat_interval < 1 or self.missed_heartbeat_threshold < 1:
            raise ConfigError(f"term settings must be positive: {self}")


@dataclass
class NodeState:
    node_id: int
    name: str
    role: Role = Role.FOLLOWER
    current_term: int = 0
    alive: bool = True
    missed_heartbeats: int = 0
    pending: list[LedgerEntry] = field(default_factory=list)
    chain: Chain = field(default_factory=Chain)


@dataclass
class AbortSignal:
    round: int
    received: int
    quorum: int
    discarded: list[LedgerEntry]


class EventLog:
    """Append-only ``round=<r> <KIND> key=value ...`` lines."""

    def __init__(self):
        self.lines: list[str] = []

    def emit(self, round_: int, kind: str, **fields) -> None:
        tail = " ".join(f"{k}={v}" for k, v in fields.items())
        self.lines.append(f"round={round_} {kind}" + (f" {tail}" if tail else ""))

    def of_kind(self, kind: str) -> list[str]:
        return [ln for ln in self.lines if ln.split(" ", 2)[1] == kind]

    def count(self, kind: str) -> int:
        return len(self.of_kind(kind))

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(ln + "\n" for ln in self.lines))
        return path


def quorum(follower_count: int) -> int:
    """Ledgers the leader needs: a strict majority of followers (none if alone)."""
    return 0 if follower_count == 0 else follower_count // 2 + 1


def start_election(alive_ids, rng: np.random.Generator) -> tuple[int, Counter]:
    """One round of random plurality voting among ``alive_ids``.

    Voters are processed in ascending id order; each draws its choice with
    ``rng.integers(n)`` over the sorted candidate list.
    """
    candidates = sorted(alive_ids)
    if not candidates:
        raise TotalFailure("no alive server to elect")
    votes = Counter(candidates[int(rng.integers(len(candidates)))] for _ in candidates)
    winner = min(votes, key=lambda nid: (-votes[nid], nid))
    return winner, votes


class Cluster:
    def __init__(self, num_servers: int, term: TermConfig | None = None, rng: np.random.Generator | None = None,
                 log: EventLog | None = None, names: list[str] | None = None):
        if num_servers < 1:
            raise ConfigError("need at least one server")
        names = names or [f"S{i}" for i in range(num_servers)]
        self.nodes = [NodeState(i, names[i]) for i in range(num_servers)]
        self.term = term or TermConfig()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.log = log if log is not None else EventLog()
        self.term_number = 0
        self.term_started = 0
        self.leader_id: int | None = None
        self.elections = 0
        self.aborts = 0
        self.commits = 0

    # -- views ---------------------------------------------------------------

    @property
    def leader(self) -> NodeState | None:
        return None if self.leader_id is None else self.nodes[self.leader_id]

    def alive_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes if n.alive]

    def followers(self) -> list[NodeState]:
        return [n for n in self.nodes if n.node_id != self.leader_id]

    def alive_leaders(self) -> list[int]:
        return [n.node_id for n in self.nodes if n.alive and n.role is Role.LEADER]

    @property
    def chain(self) -> Chain:
        """The leader's copy (or node 0's before any leader exists)."""
        return (self.leader or self.nodes[0]).chain

    # -- role machine --------------------------------------------------------

    def elect(self, round_: int, reason: str) -> int:
        alive = self.alive_ids()
        if not alive:
            self.log.emit(round_, "TOTAL_FAILURE")
            raise TotalFailure(f"round {round_}: every server is paralyzed")
        for nid in alive:
            self.nodes[nid].role = Role.CANDIDATE
        winner, votes = start_election(alive, self.rng)
        self.term_number += 1
        self.term_started = round_
        for node in self.nodes:
            node.missed_heartbeats = 0
            if node.alive:
                node.current_term = self.term_number
            node.role = Role.LEADER if node.node_id == winner else Role.FOLLOWER
        self.leader_id = winner
        self.elections += 1
        self.log.emit(round_, "ELECTION", term=self.term_number, winner=self.nodes[winner].name,
                      votes=votes[winner], reason=reason)
        return winner

    def bootstrap(self, round_: int = 0) -> Block:
        """Initial election, then the leader creates and broadcasts the genesis block."""
        self.elect(round_, "bootstrap")
        block = append_block(self.leader.chain, (), self.term_number, round_)
        self._broadcast()
        self.log.emit(round_, "COMMIT", height=self.leader.chain.height, entries=0)
        return block

    def heartbeat_tick(self, round_: int) -> bool:
        """Advance heartbeat bookkeeping; returns True if an election fired."""
        leader = self.leader
        if leader is not None and leader.alive and round_ - self.term_started >= self.term.term_length:
            self.elect(round_, "term")
            return True
        if round_ % self.term.heartbeat_interval != 0:
            return False
        if leader is not None and leader.alive:
            for f in self.followers():
                if f.alive:
                    f.missed_heartbeats = 0
            return False
        for f in self.followers():
            if f.alive:
                f.missed_heartbeats += 1
                self.log.emit(round_, "HEARTBEAT_MISS", node=f.name, missed=f.missed_heartbeats)
        if any(f.alive and f.missed_heartbeats >= self.term.missed_heartbeat_threshold for f in self.followers()):
            self.elect(round_, "heartbeat")
            return True
        return False

    # -- ledgers and blocks --------------------------------------------------

    def record(self, node_id: int, entry: LedgerEntry) -> None:
        node = self.nodes[node_id]
        if not node.alive:
            return
        if any(e.key == entry.key for e in node.pending):
            raise ConfigError(f"duplicate ledger entry {entry.key} on {node.name}")
        node.pending.append(entry)

    def collect_and_commit(self, round_: int, caller: int | None = None) -> Block | AbortSignal | None:
        """Gather follower ledgers and commit, or abort below quorum.

        Returns ``None`` when there is no alive leader (the missed-heartbeat
        path handles that) or when nobody had anything to record.
        """
        if caller is not None and caller != self.leader_id:
            raise AuthorizationError(f"{self.nodes[caller].name} is not the leader")
        leader = self.leader
        if leader is None or not leader.alive:
            self._discard_pending()
            return None
        followers = self.followers()
        received = [f for f in followers if f.alive]
        need = quorum(len(followers))
        if len(received) < need:
            discarded = self._discard_pending()
            self.aborts += 1
            self.log.emit(round_, "ABORT", received=len(received), quorum=need, discarded=len(discarded))
            self.elect(round_, "abort")
            return AbortSignal(round_, len(received), need, discarded)
        entries = list(leader.pending)
        for f in received:
            entries.extend(f.pending)
        self._discard_pending()
        if not entries:
            return None
        entries.sort(key=lambda e: (e.pair_id, e.epoch, e.batch))
        block = append_block(leader.chain, entries, self.term_number, round_)
        self._broadcast()
        self.commits += 1
        self.log.emit(round_, "COMMIT", height=leader.chain.height, entries=len(entries))
        return block

    def _discard_pending(self) -> list[LedgerEntry]:
        dropped = []
        for node in self.nodes:
            dropped.extend(node.pending)
            node.pending = []
        return dropped

    def _broadcast(self) -> None:
        for node in self.nodes:
            if node.alive and node is not self.leader:
                node.chain = self.leader.chain.copy()

    # -- faults --------------------------------------------------------------

    def set_alive(self, node_id: int, alive: bool, round_: int) -> None:
        node = self.nodes[node_id]
        if node.alive == alive:
            return
        node.alive = alive
        if alive:
            node.missed_heartbeats = 0
            node.pending = []
            if node.node_id != self.leader_id:
                node.role = Role.FOLLOWER
            self.sync(node_id)

    def sync(self, node_id: int) -> None:
        """Bring a recovering server up to the majority chain and current term."""
        majority = reconcile([n.chain for n in self.nodes if n.alive and n.node_id != node_id])
        if majority is not None:
            self.nodes[node_id].chain = majority
        self.nodes[node_id].current_term = self.term_number

    def reconcile_all(self, round_: int) -> Chain | None:
        """Every alive server adopts the version held by a strict majority of all copies."""
        majority = reconcile([n.chain for n in self.nodes])
        if majority is None:
            self.log.emit(round_, "RECONCILE_FAILED")
            return None
        repaired = 0
        for node in self.nodes:
            if node.alive and node.chain != majority:
                node.chain = majority.copy()
                repaired += 1
        self.log.emit(round_, "RECONCILE", repaired=repaired)
        return majority
