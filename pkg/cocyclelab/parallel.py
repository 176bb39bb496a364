"""
Deterministic trial pool

Trials are keyed by index; every trial seeds its own generator from
(seed, trial, stream), so results do not depend on which worker ran them.
Results always come back in trial order.
"""

from multiprocessing import Pool
from typing import Callable, List, Sequence, TypeVar

from loguru import logger

T = TypeVar("T")

_default_workers = 1


def set_default_workers(workers: int):
    """Worker count used when a caller does not pass one (set by the CLI)"""
    global _default_workers
    _default_workers = max(1, int(workers))


def default_workers() -> int:
    return _default_workers


def run_trials(worker: Callable[[int], T], trials: Sequence[int], workers: int = 0) -> List[T]:
    """
    Map worker over trial indices.

    Args:
        worker: picklable callable (module-level function or functools.partial of one)
        trials: trial indices
        workers: pool size; 0 means the configured default, 1 runs in-process

    Returns:
        results in the order of `trials`
    """
    trials = list(trials)
    workers = workers or _default_workers
    if workers <= 1 or len(trials) <= 1:
        return [worker(t) for t in trials]
    workers = min(workers, len(trials))
    logger.debug(f"dispatching {len(trials)} trials to {workers} workers")
    with Pool(processes=workers) as pool:
        return pool.map(worker, trials)
