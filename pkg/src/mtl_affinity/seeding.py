"""Deterministic random-stream derivation.

Every consumer of randomness gets its own substream derived from the root
seed plus a purpose tag, so adding or removing one consumer (say, scoring
one extra pair) never shifts the draws any other consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Purpose tags. Values are part of the reproducibility contract: changing
# them changes every derived stream.
DATASET = 0
INIT = 1
BATCHING = 2

__all__ = ["DATASET", "INIT", "BATCHING", "substream", "model_stream"]


def substream(root_seed: int, purpose: int, *extra: int) -> np.random.Generator:
    """Generator for (root_seed, purpose[, extra...]), independent per tuple."""
    return np.random.default_rng(np.random.SeedSequence((int(root_seed), int(purpose),
                                                          *map(int, extra))))


def model_stream(root_seed: int, purpose: int, model_key: str) -> np.random.Generator:
    """Generator tied to a named model, e.g. "stl/task0" or "mtl/task0/task2".

    The key is hashed so streams depend only on (seed, purpose, key), not on
    how many other models exist or the order they are trained in.
    """
    digest = hashlib.sha256(model_key.encode("utf-8")).digest()
    return substream(root_seed, purpose, int.from_bytes(digest[:8], "big"))
