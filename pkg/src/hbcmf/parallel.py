"""Reproducible random streams and schedule-independent row parallelism.

Every random draw is taken from a stream keyed by ``(seed, *key)``, where
the key names the epoch, entity type and purpose.  Per-row draws are the
rows of arrays drawn from such a stream, so row ``i`` always receives the
same numbers.  Work is split into fixed-size chunks whose boundaries do not
depend on the thread count, so results are bit-identical for any ``threads``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK_ROWS = 64

# stream purposes
INIT = 0
INIT_ETA = 1
ROWS = 2
HYPER = 3
FOLDIN = 4
SPLIT = 5
SYNTH = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def chunked_map(fn, n: int, threads: int = 1, chunk: int = CHUNK_ROWS) -> list:
    """Apply ``fn(slice)`` over ``range(n)`` in fixed chunks; results in order."""
    slices = [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    if threads <= 1 or len(slices) <= 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, slices))
