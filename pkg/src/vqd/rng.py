"""Seed derivation: one global seed fans out into independent named streams.

Each component draws from its own ``numpy.random.Generator`` derived from
``(master_seed, *tags)`` via SHA-256, so parallel and serial executions of
per-clip work see identical randomness and no stream ever aliases another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *tags) -> int:
    """Return a 63-bit seed unique to (master_seed, tags).

    Uses SHA-256 rather than ``hash()`` so results are stable across
    processes and platforms.
    """
    key = repr((int(master_seed),) + tuple(str(t) for t in tags))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(master_seed: int, *tags) -> np.random.Generator:
    """Independent Generator for the stream named by ``tags``."""
    return np.random.default_rng(derive_seed(master_seed, *tags))
