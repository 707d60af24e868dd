"""Split variational-information-bottleneck training with a Raft-lite ledger."""

__version__ = "0.1.0"
