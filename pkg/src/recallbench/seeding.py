"""Seed derivation shared by every stage.

All randomness is keyed by a tuple of integers and strings so that two stages
never draw from the same stream, and a single experiment seed determines
everything downstream.
"""
import hashlib

import numpy as np
import torch


def _to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(*keys):
    return np.random.SeedSequence([_to_int(k) for k in keys])


def rng_for(*keys):
    """Counter-based generator (Philox) for the given key path."""
    return np.random.Generator(np.random.Philox(seed_sequence(*keys)))


def derive_seed(*keys):
    """A 63-bit integer seed, usable by torch and stored in configs."""
    return int(seed_sequence(*keys).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(*keys):
    g = torch.Generator()
    g.manual_seed(derive_seed(*keys))
    return g
