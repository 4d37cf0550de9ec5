"""Deterministic random stream derivation.

Every stochastic choice in the library (data generation, validation splits,
batch shuffles, threat sampling, attack restarts, few-shot trials) draws from
a generator derived here from an integer seed plus a tuple of context keys.
Independent concerns never share a stream, so adding draws to one part of a
pipeline cannot perturb another, and any run replays bit-exactly.
"""

import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (bool, float)):
        raise TypeError("rng keys must be ints or strings, got %r" % (key,))
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError("rng keys must be ints or strings, got %r" % (key,))


def derive_rng(seed, *keys):
    """A Generator determined by (seed, keys); distinct keys give independent streams."""
    ss = np.random.SeedSequence(
        entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=tuple(_key_to_int(k) for k in keys),
    )
    return np.random.default_rng(ss)


def derive_seed(seed, *keys):
    """A stable 63-bit integer derived from (seed, keys), for nesting derivations."""
    ss = np.random.SeedSequence(
        entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=tuple(_key_to_int(k) for k in keys),
    )
    return int(ss.generate_state(1, np.uint64)[0] >> 1)
