"""Chunked parallel map over index ranges.

The CLI owns the thread count; library code takes an optional ``ParallelMap``
and never spawns threads on its own. Work is split into contiguous index
chunks and each chunk writes to a disjoint slice of preallocated output, so
results are identical for any thread count. The heavy kernels release the GIL,
which lets chunks overlap on multi-core hosts.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

__all__ = ["ParallelMap", "SERIAL"]


class ParallelMap:
    def __init__(self, threads: int = 1):
        if threads < 1:
            raise ValueError("threads must be >= 1")
        self.threads = int(threads)

    def chunks(self, n: int, min_chunk: int = 1024):
        """Split range(n) into at most `threads` contiguous (start, stop) spans."""
        if n <= 0:
            return []
        size = max(min_chunk, -(-n // self.threads))
        return [(i, min(i + size, n)) for i in range(0, n, size)]

    def run(self, fn, n: int, min_chunk: int = 1024) -> None:
        """Call fn(start, stop) for every chunk, possibly concurrently."""
        spans = self.chunks(n, min_chunk)
        if self.threads == 1 or len(spans) <= 1:
            for a, b in spans:
                fn(a, b)
            return
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            list(pool.map(lambda ab: fn(*ab), spans))


SERIAL = ParallelMap(1)
