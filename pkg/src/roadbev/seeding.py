"""Deterministic named random substreams: one run seed, one stream per purpose."""

import hashlib

import numpy as np


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Generator for a named substream of `seed`; stable across runs and platforms."""
    digest = hashlib.sha256(purpose.encode()).digest()[:8]
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int.from_bytes(digest, "little")]))
