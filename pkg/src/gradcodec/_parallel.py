"""Chunked element-parallel execution capped by ``GRADCODEC_THREADS``."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

ENV_THREADS = "GRADCODEC_THREADS"
CHUNK = 1 << 18


def worker_count() -> int:
    raw = os.environ.get(ENV_THREADS, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def map_chunks(fn: Callable[[int, int], np.ndarray], n: int, chunk: int = CHUNK) -> np.ndarray:
    """Evaluate ``fn(start, stop)`` over ``[0, n)`` in chunks and concatenate in order.

    ``fn`` must depend only on the element range it is given, so the result is
    identical for any worker count.
    """
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if not bounds:
        return fn(0, 0)
    workers = min(worker_count(), len(bounds))
    if workers == 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    return np.concatenate(parts)
