"""Deterministic random-stream derivation.

Every stochastic stage derives its generator from the single run seed via

    rng_for(seed, label, *indices)

which keys a Philox bit generator on SHA-256(label) together with the seed
and any block/step indices.  Streams for different labels or indices are
independent by construction, and a block's content depends only on
(seed, label, indices), never on how work is split across threads: code
that consumes noise in fixed-size blocks is therefore bit-reproducible
regardless of parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["label_entropy", "rng_for"]


def label_entropy(label: str) -> int:
    """Stable 64-bit integer derived from a textual stream label."""
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def rng_for(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Generator for the (label, indices) substream of a root seed."""
    entropy = (int(seed), label_entropy(label), *[int(i) for i in indices])
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
