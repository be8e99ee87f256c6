"""Seed plumbing.

All randomness in the package flows through the Philox 4x64 counter-based
bit generator (via numpy), keyed by explicit integer seeds.  Independent
streams are derived by hashing a root seed together with string tags
(SHA-256, first 8 bytes little-endian), so that e.g. per-strategy or
per-epoch streams never collide and results are reproducible run to run.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Derive a child seed from a root seed and a sequence of labels."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "little")


def generator(seed: int) -> np.random.Generator:
    """A fresh Philox-keyed generator for the given seed."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & (2**64 - 1))))


def normal(shape, seed: int, mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Seeded normal draw.

    Values are produced in float64 and then cast, so the float32 and
    float64 variants of the same (shape, seed) agree up to rounding.
    """
    g = generator(seed)
    values = g.standard_normal(size=shape, dtype=np.float64) * std + mean
    return np.ascontiguousarray(values.astype(dtype))
