"""Ordered process-pool map used for replication- and target-level work."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

_SINGLE_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _init_worker():
    for var in _SINGLE_THREAD_ENV:
        os.environ.setdefault(var, "1")


def parallel_map(fn: Callable, tasks: Sequence, workers: int = 1) -> list:
    """``[fn(t) for t in tasks]`` evaluated on up to ``workers`` processes.

    Results come back in task order, so any reduction over them is
    independent of the worker count.
    """
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), initializer=_init_worker) as ex:
        return list(ex.map(fn, tasks))


def chunked(n: int, size: int) -> Iterable[range]:
    for start in range(0, n, size):
        yield range(start, min(n, start + size))
