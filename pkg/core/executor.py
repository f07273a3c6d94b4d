import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """Apply `func` to every item, in input order, optionally across processes.

    `func` must be picklable (module-level function or functools.partial of one)
    when jobs > 1.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    workers = min(jobs, len(items))
    chunksize = max(1, len(items) // (workers * 4))
    logger.debug(f"[EXECUTOR] {len(items)} items over {workers} workers (chunksize={chunksize})")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items, chunksize=chunksize))
