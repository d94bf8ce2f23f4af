"""
Row-parallel helpers for the per-pixel kernels.

Per-pixel work (warping, jacobians, census signatures) is independent across
rows, so it can be split into contiguous row blocks and evaluated on a thread
pool.

Results are always concatenated in row order, so a multi-threaded run is
bit-identical to a single-threaded one. Reductions (means, sums) are never
done per block; callers reduce the concatenated map.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

# Dedicated pool for per-pixel work, created lazily on first parallel call
_row_executor: Optional[ThreadPoolExecutor] = None
_threads = 1


def set_threads(threads: int) -> None:
    """Set the number of worker threads used by map_row_blocks (1 = serial)."""
    global _row_executor, _threads
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    if threads != _threads and _row_executor is not None:
        _row_executor.shutdown(wait=True)
        _row_executor = None
    _threads = threads
    logger.debug(f"Row-parallel workers set to {threads}")


def get_threads() -> int:
    return _threads


def _executor() -> ThreadPoolExecutor:
    global _row_executor
    if _row_executor is None:
        _row_executor = ThreadPoolExecutor(max_workers=_threads, thread_name_prefix="vidnum_rows_")
    return _row_executor


def row_blocks(height: int, blocks: int) -> List[tuple]:
    """Split [0, height) into at most `blocks` contiguous (start, stop) ranges."""
    blocks = max(1, min(blocks, height))
    edges = np.linspace(0, height, blocks + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def map_row_blocks(fn: Callable[[int, int], np.ndarray], height: int) -> np.ndarray:
    """
    Evaluate fn(start, stop) over row blocks and stack the results along axis 0.

    Usage:
        out = map_row_blocks(lambda a, b: kernel(rows=slice(a, b)), height)

    Args:
        fn: Computes the rows [start, stop) of the output
        height: Number of output rows

    Returns:
        The concatenated per-row result, identical for any thread count
    """
    threads = get_threads()
    if threads == 1 or height < 2 * threads:
        return fn(0, height)
    ranges = row_blocks(height, threads)
    futures = [_executor().submit(fn, a, b) for a, b in ranges]
    return np.concatenate([f.result() for f in futures], axis=0)


def shutdown_executor() -> None:
    """
    Shutdown the row executor gracefully.
    Call this when the command-line run is finishing.
    """
    global _row_executor
    if _row_executor is not None:
        _row_executor.shutdown(wait=True)
        _row_executor = None
