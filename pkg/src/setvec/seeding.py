"""Named random sub-streams derived from one top-level seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` ("data", "init", "shuffle", ...) under ``seed``.

    The same (seed, name) pair always yields the same stream, and different
    names never share state, so an ablation can vary one stream while keeping
    the others fixed.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
