"""Keyed random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from an integer seed plus a tuple of integer labels (experiment kind,
trial index, chunk index, ...). Streams never depend on execution order, so
serial and parallel runs see identical numbers.
"""

import zlib

import numpy as np


def label(name):
    """Stable 32-bit integer for a string label (CRC32)."""
    return zlib.crc32(name.encode("utf-8")) & 0xFFFFFFFF


def _key(parts):
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(label(p))
        else:
            p = int(p)
            if p < 0:
                raise ValueError(f"stream labels must be non-negative, got {p}")
            out.append(p)
    return tuple(out)


def stream(seed, *keys):
    """Return a Philox generator keyed by ``(seed, *keys)``.

    String keys are hashed with :func:`label`. Two calls with equal arguments
    produce bit-identical draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key(keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *keys):
    """Integer sub-seed for ``(seed, *keys)``; 63 bits so it fits a signed int."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key(keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1
