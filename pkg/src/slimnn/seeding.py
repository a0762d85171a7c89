"""Deterministic seed plumbing.

Every source of randomness in the package (weight init, batch order,
dropout, validation splits, variant generation, edge hashing) is keyed off
a 64-bit seed derived here, so a (config, base_seed) pair replays exactly.
"""

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x):
    """One avalanche round of the splitmix64 mixer.

    Accepts scalars or uint64 arrays; always computes on ndarrays so the
    arithmetic wraps mod 2**64 without scalar-overflow warnings.
    """
    z = np.atleast_1d(np.asarray(x, dtype=np.uint64)) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(base, *tags):
    """Derive an independent 64-bit stream seed from `base` and string tags.

    Stable across platforms and processes (sha256-based, no PYTHONHASHSEED
    dependence).
    """
    h = hashlib.sha256(str(int(base)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "big")


def rng_for(base, *tags):
    """A numpy Generator seeded from derive_seed(base, *tags)."""
    return np.random.default_rng(derive_seed(base, *tags))
