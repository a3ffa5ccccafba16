"""Seeded random streams and an ordered process-pool map."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable

import numpy as np


class StreamSet:
    """Independent generators for initial draws, idiosyncratic noise, B0 and bridge tests.

    Idiosyncratic normals are drawn as one vector per step in particle order,
    so results do not depend on how work is split.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        ss = np.random.SeedSequence(self.seed)
        init, idio, common, bridge = ss.spawn(4)
        self.init = np.random.Generator(np.random.PCG64(init))
        self.idio = np.random.Generator(np.random.PCG64(idio))
        self.common = np.random.Generator(np.random.PCG64(common))
        self.bridge = np.random.Generator(np.random.PCG64(bridge))


def common_path(seed: int, steps: int, dt: float) -> np.ndarray:
    """B0 increments identical to what a particle run with this seed draws."""
    gen = StreamSet(seed).common
    sdt = np.sqrt(dt)
    return np.array([sdt * gen.standard_normal() for _ in range(steps)])


def ordered_map(fn: Callable, tasks: Iterable, jobs: int = 1) -> list:
    """Map ``fn`` over tasks; results come back in task order for any ``jobs``."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))
