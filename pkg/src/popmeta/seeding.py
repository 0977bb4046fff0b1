"""Deterministic derivation of independent random streams.

Every stochastic step in the package draws from a generator built by
``rng_for(master_seed, *labels)``.  The labels name the consumer (e.g.
``("shots", structure_id, 5)``), so results never depend on call order,
worker count, or Python's per-process string hashing.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Map (master seed, labels) to a stable 128-bit integer seed."""
    key = "|".join([repr(int(master))] + [repr(lab) for lab in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def rng_for(master: int, *labels) -> np.random.Generator:
    """Independent generator for the stream named by ``labels``."""
    return np.random.default_rng(derive_seed(master, *labels))
