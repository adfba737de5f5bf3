from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "IFACE_SENTINEL_THREADS"


def thread_count(threads: int | None = None) -> int:
    """Resolve a worker count; ``None`` reads the environment, 0 means auto."""
    if threads is None:
        raw = os.environ.get(ENV_THREADS, "1").strip() or "1"
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if threads < 0:
        raise ValueError("thread count must be >= 0")
    if threads == 0:
        threads = os.cpu_count() or 1
    return threads


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """``map`` whose result order never depends on the worker count."""
    items = list(items)
    n = thread_count(threads)
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


class OrderedPool:
    """Reusable ``ordered_map`` for many small batches (one executor for the lot)."""

    def __init__(self, threads: int | None = None):
        self.n = thread_count(threads)
        self._pool = ThreadPoolExecutor(max_workers=self.n) if self.n > 1 else None

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        items = list(items)
        if self._pool is None or len(items) <= 1:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
