"""Deterministic RNG stream splitting.

Every source of randomness derives from one master seed. A component
stream is keyed by (master seed, crc32(component name), index), fed into
numpy's SeedSequence, whose expansion is specified and stable across
platforms. Parallel and serial generation therefore see identical streams.
"""

from __future__ import annotations

import hashlib
import zlib

import numpy as np


def stream_seed(master_seed: int, component: str, index: int = 0) -> np.random.Generator:
    key = zlib.crc32(component.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(key, int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def params_hash(arrays: dict[str, np.ndarray]) -> str:
    """Order-independent content hash of named arrays (hex digest)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(a.dtype).encode("ascii"))
        h.update(str(a.shape).encode("ascii"))
        h.update(a.tobytes())
    return h.hexdigest()
