"""Seed streams and an order-preserving worker pool."""
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def _key(name):
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def rng_for(seed, *names):
    """Generator for the named stream ``names`` under root ``seed``.

    Streams depend only on (seed, names), never on scheduling order, so
    results do not change with the worker count.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names)))


def parallel_map(func, items, workers=1):
    """``[func(i) for i in items]``, optionally across processes; order is preserved."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))
