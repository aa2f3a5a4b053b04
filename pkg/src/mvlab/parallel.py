"""Replication-level worker pool.

Work is cut into chunks whose boundaries depend only on the problem size,
never on the number of workers, and results are gathered in chunk order.
Combined with counter-based noise this makes every result independent of
``MVLAB_WORKERS``.
"""

from concurrent.futures import ThreadPoolExecutor
import os

DEFAULT_CHUNK = 50


def worker_count():
    raw = os.environ.get("MVLAB_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MVLAB_WORKERS must be an integer, got {raw!r}") from None
    return max(1, n)


def chunk_bounds(total, chunk=DEFAULT_CHUNK):
    return [(lo, min(lo + chunk, total)) for lo in range(0, total, chunk)]


def map_chunks(fn, total, chunk=DEFAULT_CHUNK, workers=None):
    """Apply ``fn(lo, hi)`` to fixed chunks of ``range(total)``; ordered results."""
    bounds = chunk_bounds(total, chunk)
    workers = worker_count() if workers is None else workers
    if workers == 1 or len(bounds) <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))
