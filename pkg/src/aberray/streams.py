"""Named, reproducible random streams.

All randomness in the package flows from a single user seed through
counter-based Philox generators keyed by (seed, purpose, index). Streams with
different names or indices are statistically independent, and a stream's
output never depends on how many draws other streams have made, so parallel
and serial execution orders produce identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "stream_key"]


def stream_key(name: str) -> int:
    """Stable 64-bit key for a stream name (endianness- and run-independent)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator for the (seed, name, index) stream.

    Args:
        seed: user-level seed (any Python int, reduced mod 2**64).
        name: purpose label, e.g. "pupil", "jitter", "init".
        index: sub-stream index, e.g. a source or iteration number.
    """
    key = np.array([seed % (1 << 64), stream_key(name) ^ (index % (1 << 64))],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
