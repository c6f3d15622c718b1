"""Deterministic, platform-stable random streams.

Every stochastic draw in the package flows through `stream(...)`: the key
parts are hashed with BLAKE2b into a Philox key, so any (seed, purpose,
index) tuple names one independent stream. Streams never depend on worker
count or call order elsewhere in the program, which is what makes sharded
generation byte-identical to sequential generation.
"""

import hashlib

import numpy as np


def key_digest(*parts) -> bytes:
    """Hash arbitrary key parts (ints/strings) into 32 bytes."""
    h = hashlib.blake2b(digest_size=32)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


def stream(*parts) -> np.random.Generator:
    """Independent Generator for the given key parts."""
    key = np.frombuffer(key_digest(*parts)[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_int(*parts, bits: int = 31) -> int:
    """Stable non-negative integer derived from the key parts."""
    digest = key_digest(*parts)
    return int.from_bytes(digest[:8], "little") % (1 << bits)
