"""Worker-pool plumbing shared by the generator, dsp, score and limits.

Results always come back in submission order, so reductions performed by
the caller are independent of completion order.
"""
from __future__ import annotations

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor


def available_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def resolve_workers(workers) -> int:
    """``None`` or ``0`` means all available cores."""
    if not workers:
        return available_workers()
    workers = int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def ordered_map(fn, items, workers=1):
    """``list(map(fn, items))``, optionally across processes."""
    items = list(items)
    workers = min(resolve_workers(workers), max(len(items), 1))
    if workers == 1:
        return [fn(item) for item in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(fn, items))


def split_range(n: int, parts: int):
    """Split ``range(n)`` into ``parts`` contiguous ``(start, stop)`` chunks."""
    parts = max(1, min(parts, n)) if n else 1
    bounds = [round(i * n / parts) for i in range(parts + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(parts)]
