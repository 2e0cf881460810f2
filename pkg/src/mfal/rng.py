"""Named, seed-derived random streams.

Every stochastic decision in a run draws from a stream identified by
``(master_seed, name)``. The name is hashed with a stable digest, so a
stream never depends on how many other streams were created before it or
on the worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    # four 32-bit words are plenty to keep named streams apart
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for the sub-stream ``name`` of ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_name_key(name))
    return np.random.default_rng(ss)


def child_seed(seed: int, name: str) -> int:
    """Derive a 63-bit integer seed, e.g. for per-replication master seeds."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_name_key(name))
    lo, hi = (int(w) for w in ss.generate_state(2, dtype=np.uint32))
    return lo | ((hi & 0x7FFFFFFF) << 32)
