from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "FREDHOLM_MC_THREADS"

_local = threading.local()


def max_workers() -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _in_worker(fn):
    def wrapped(x):
        _local.busy = True
        try:
            return fn(x)
        finally:
            _local.busy = False

    return wrapped


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """``list(map(fn, items))`` on a thread pool; output order is input order.

    Calls made from inside a worker run serially, so nesting never
    oversubscribes the pool.
    """
    items = list(items)
    workers = min(max_workers(), len(items))
    if workers <= 1 or getattr(_local, "busy", False):
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_in_worker(fn), items))
