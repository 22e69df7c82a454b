"""Deterministic random-stream derivation.

Every random choice in the pipeline (point sampling, triplet sampling,
parameter init) draws from a generator derived from one root seed plus a
named substream, so that runs are reproducible and independent stages do
not share or perturb each other's streams.
"""

import zlib

import numpy as np


def substream(seed, *keys):
    """Return a ``numpy.random.Generator`` for a named substream.

    Parameters
    ----------
    seed : int
        Root seed of the run.
    *keys : int or str
        Substream identifiers, e.g. ``("triplets", epoch)`` or
        ``("sampling", shape_id)``. Strings are hashed with crc32 so the
        derivation is stable across processes and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            entropy.append(zlib.crc32(k.encode("utf-8")))
        else:
            entropy.append(int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))
