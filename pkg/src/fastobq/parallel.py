import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

ENV_THREADS = "FASTOBQ_THREADS"


def resolve_threads(threads=None) -> int:
    """Worker count: explicit argument, else ``$FASTOBQ_THREADS``, else 1.

    ``0`` means one worker per CPU.
    """
    if threads is None:
        raw = os.environ.get(ENV_THREADS, "").strip()
        threads = int(raw) if raw else 1
    threads = int(threads)
    if threads < 0:
        raise ValueError(f"thread count must be >= 0, got {threads}")
    if threads == 0:
        threads = os.cpu_count() or 1
    return threads


def row_chunks(n_rows: int, threads: int) -> list[np.ndarray]:
    return [c for c in np.array_split(np.arange(n_rows), min(threads, n_rows)) if c.size]


def map_ordered(fn, items, threads: int):
    """``list(map(fn, items))`` with up to ``threads`` workers; output order is input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
