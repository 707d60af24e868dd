"""Hash-linked blocks of mutual-information ledger entries.

Canonical block serialization (all integers big-endian, reals as the raw
big-endian IEEE-754 binary64 bit pattern)::

    b"BVIBBLK1"
    index        u64
    prev_hash    32 bytes
    timestamp    u64      (logical round)
    term         u64
    n_entries    u32
    n_entries x:
        epoch          u32
        batch          u32
        pair_id        u32
        mi_upper_bits  f64
        mi_lower_bits  f64
        timestamp      u64

The block hash is SHA-256 over those bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AuthorizationError, ConfigError

ZERO_HASH = bytes(32)
BLOCK_MAGIC = b"BVIBBLK1"
_HEADER = struct.Struct(">Q32sQQI")
_ENTRY = struct.Struct(">IIIddQ")


@dataclass(frozen=True)
class LedgerEntry:
    epoch: int
    batch: int
    pair_id: int
    mi_upper_bits: float
    mi_lower_bits: float
    timestamp: int

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.epoch, self.batch, self.pair_id)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "batch": self.batch,
            "pair_id": self.pair_id,
            "mi_upper_bits": self.mi_upper_bits,
            "mi_lower_bits": self.mi_lower_bits,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    timestamp: int
    term: int
    entries: tuple[LedgerEntry, ...]
    hash: bytes = field(default=ZERO_HASH)

    def to_dict(self) -> dict:
        return {
            "height": self.index,
            "term": self.term,
            "timestamp": self.timestamp,
            "prev_hash": self.prev_hash.hex(),
            "hash": self.hash.hex(),
            "entries": [e.to_dict() for e in self.entries],
        }


def serialize_block(index: int, prev_hash: bytes, timestamp: int, term: int, entries) -> bytes:
    if len(prev_hash) != 32:
        raise ConfigError(f"prev_hash must be 32 bytes, got {len(prev_hash)}")
    parts = [BLOCK_MAGIC, _HEADER.pack(index, prev_hash, timestamp, term, len(entries))]
    parts += [_ENTRY.pack(e.epoch, e.batch, e.pair_id, e.mi_upper_bits, e.mi_lower_bits, e.timestamp) for e in entries]
    return b"".join(parts)


def hash_block(index: int, prev_hash: bytes, timestamp: int, term: int, entries) -> bytes:
    return hashlib.sha256(serialize_block(index, prev_hash, timestamp, term, entries)).digest()


def make_block(index: int, prev_hash: bytes, timestamp: int, term: int, entries) -> Block:
    entries = tuple(entries)
    return Block(index, prev_hash, timestamp, term, entries, hash_block(index, prev_hash, timestamp, term, entries))


def genesis_block(term: int = 0, timestamp: int = 0) -> Block:
    return make_block(0, ZERO_HASH, timestamp, term, ())


class Chain:
    """Append-only list of blocks.  Each server holds its own copy."""

    def __init__(self, blocks=None):
        self.blocks: list[Block] = list(blocks or [])

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i) -> Block:
        return self.blocks[i]

    def __iter__(self):
        return iter(self.blocks)

    def __eq__(self, other) -> bool:
        return isinstance(other, Chain) and self.blocks == other.blocks

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Block | None:
        return self.blocks[-1] if self.blocks else None

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].hash if self.blocks else ZERO_HASH

    def copy(self) -> "Chain":
        return Chain(self.blocks)

    def entries(self):
        for block in self.blocks:
            yield from block.entries


def append_block(chain: Chain, entries, term: int, round_: int, is_leader: bool = True) -> Block:
    """Link a new block to the tip; creates the genesis block on an empty chain."""
    if not is_leader:
        raise AuthorizationError("only the leader may append blocks")
    entries = tuple(entries)
    if not chain.blocks:
        if entries:
            raise ConfigError("the genesis block carries no entries")
        block = genesis_block(term, round_)
    else:
        if not entries:
            raise ConfigError("a block needs at least one ledger entry")
        keys = [e.key for e in entries]
        if len(set(keys)) != len(keys):
            raise ConfigError("duplicate (epoch, batch, pair_id) in block entries")
        tip = chain.tip
        block = make_block(tip.index + 1, tip.hash, round_, term, entries)
    chain.blocks.append(block)
    return block


def validate_chain(chain: Chain) -> int | None:
    """Return ``None`` if every block verifies, else the lowest bad height."""
    prev = ZERO_HASH
    for height, block in enumerate(chain.blocks):
        if block.index != height or block.prev_hash != prev:
            return height
        if hash_block(block.index, block.prev_hash, block.timestamp, block.term, block.entries) != block.hash:
            return height
        prev = block.hash
    return None


def reconcile(copies: list[Chain]) -> Chain | None:
    """Pick the chain version held by a strict majority of ``copies``.

    Versions are compared on full block contents, not just stored hashes, so
    an edit that skipped rehashing still counts as a different version.
    Returns ``None`` when no version reaches a strict majority.
    """
    if not copies:
        return None
    votes = Counter(tuple(c.blocks) for c in copies)
    version, count = votes.most_common(1)[0]
    if 2 * count <= len(copies):
        return None
    return Chain(version)


def export_chain(chain: Chain, path) -> Path:
    """One JSON object per line, one line per block."""
    path = Path(path)
    with open(path, "w") as fh:
        for block in chain.blocks:
            fh.write(json.dumps(block.to_dict(), sort_keys=True) + "\n")
    return path


def load_chain(path) -> Chain:
    blocks = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            entries = tuple(LedgerEntry(**e) for e in d["entries"])
            blocks.append(Block(d["height"], bytes.fromhex(d["prev_hash"]), d["timestamp"], d["term"],
                                entries, bytes.fromhex(d["hash"])))
    return Chain(blocks)
