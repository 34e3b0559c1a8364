"""Deterministic chunked parallelism helpers.

Work is split into ordered chunks; results are collected in chunk order and
reduced sequentially, so outputs are identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "CYTOMATCH_THREADS"


def thread_count(requested: int | None = None) -> int:
    """Resolve a worker count: explicit argument, else $CYTOMATCH_THREADS, else 1."""
    if requested is not None and requested > 0:
        return int(requested)
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return n if n > 0 else 1


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map `fn` over `items`, preserving order regardless of worker count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def chunk_slices(n: int, size: int) -> Iterator[slice]:
    """Yield contiguous slices covering range(n) in blocks of at most `size`."""
    size = max(1, int(size))
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))
