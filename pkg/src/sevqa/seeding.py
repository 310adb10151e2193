"""Deterministic seed fan-out.

Every run takes a single master seed. Components (splitting, model init,
per-epoch shuffling, sampling) derive their own seed from the master seed
plus a label path, so adding a component never perturbs the random streams
of the others, and a resumed run rebuilds identical streams from scratch.

The derivation is sha256-based rather than ``hash()``-based because Python
salts ``hash()`` per process.
"""

from __future__ import annotations

import hashlib

_MOD = 2**32


def derive_seed(master_seed: int, *labels: object) -> int:
    """Map (master_seed, label path) to a stable 32-bit seed."""
    key = ":".join([str(int(master_seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % _MOD
