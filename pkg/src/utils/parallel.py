"""
Chunked Parallel Map
Fixed-order joblib fan-out so results never depend on the worker count
"""

import logging
import os
from typing import Callable, Optional

import numpy as np
from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 4096


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(os.getenv("DATORUS_THREADS", "1")))


def chunked_map(
    func: Callable[[np.ndarray], np.ndarray],
    points: np.ndarray,
    threads: Optional[int] = None,
    chunk: int = DEFAULT_CHUNK,
) -> np.ndarray:
    """
    Apply a row-wise vectorized function over fixed-size chunks

    Args:
        func: maps an (m, ...) array to an (m, ...) array
        points: rows to process
        threads: worker cap (defaults to DATORUS_THREADS)
        chunk: rows per task; fixed so results are bit-identical across thread counts

    Returns:
        Concatenated results in input order
    """
    n_jobs = resolve_threads(threads)
    pieces = [points[i:i + chunk] for i in range(0, len(points), chunk)]
    if not pieces:
        return func(points)
    if n_jobs == 1 or len(pieces) == 1:
        results = [func(p) for p in pieces]
    else:
        results = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(func)(p) for p in pieces)
    return np.concatenate(results, axis=0)


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, *keys)"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *(int(k) for k in keys)])))
