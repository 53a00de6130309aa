"""Deterministic random-stream derivation.

One master seed fans out to labelled component streams through a
counter-based generator (Philox) keyed by SHA-256 of the label path, so
every consumer gets an independent, reproducible stream and adding a new
consumer never shifts the draws of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(master_seed: int, *labels) -> int:
    """64-bit key for (master_seed, label, label, ...)."""
    h = hashlib.sha256()
    h.update(int(master_seed).to_bytes(16, "little", signed=True))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def rng_stream(master_seed: int, *labels) -> np.random.Generator:
    """Independent generator for one named component."""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, *labels)))
