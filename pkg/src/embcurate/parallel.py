"""Deterministic thread helpers.

Work is always split into fixed-size chunks whose boundaries do not depend
on the thread count, and chunk results are merged in chunk order. Running
with 1, 4, or 8 threads therefore produces byte-identical outputs.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "EMBCURATE_THREADS"


def thread_count(requested: int | None = None) -> int:
    """Resolve the worker count: explicit argument, else env var, else 1."""
    if requested is not None:
        if requested < 1:
            raise ValueError(f"thread count must be >= 1, got {requested}")
        return requested
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return 1


def chunk_ranges(n: int, chunk: int) -> list[tuple[int, int]]:
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def thread_map(fn, items, threads: int | None = None) -> list:
    """Map fn over items, preserving input order in the result list."""
    workers = thread_count(threads)
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
