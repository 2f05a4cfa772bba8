"""Deterministic fan-out over trial chunks."""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

ENV_THREADS = "AP_TRACE_THREADS"


def resolve_workers(threads: int | None = None) -> int:
    """Flag, else the AP_TRACE_THREADS environment variable, else the CPU count."""
    if threads is not None:
        if threads < 1:
            raise ValueError("threads must be >= 1")
        return int(threads)
    env = os.environ.get(ENV_THREADS)
    if env:
        value = int(env)
        if value < 1:
            raise ValueError(f"{ENV_THREADS} must be >= 1")
        return value
    return os.cpu_count() or 1


def chunks(total: int, size: int) -> list[tuple[int, int]]:
    """(start, count) pieces of range(total); independent of the worker count."""
    return [(s, min(size, total - s)) for s in range(0, total, size)]


def pmap(fn: Callable, tasks: Sequence, workers: int = 1) -> list:
    """``[fn(t) for t in tasks]``, possibly in worker processes, in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), mp_context=ctx) as pool:
        return list(pool.map(fn, tasks))
