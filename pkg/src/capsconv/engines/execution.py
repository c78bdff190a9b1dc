"""Execution settings shared by the accelerated engines."""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Literal

import numba

logger = logging.getLogger(__name__)

AccumulationMode = Literal["reference", "optimized"]


@dataclass
class ExecutionOptions:
    """Runtime switches for the accelerated engines."""
    # reference pins the canonical summation order; optimized uses numpy/BLAS
    mode: AccumulationMode = "reference"
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("reference", "optimized"):
            raise ValueError(f"mode must be 'reference' or 'optimized', got '{self.mode}'")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    @property
    def reference(self) -> bool:
        return self.mode == "reference"


def available_workers() -> int:
    """Largest thread count numba can run parallel regions with."""
    return numba.config.NUMBA_NUM_THREADS


@contextmanager
def worker_threads(workers: int) -> Iterator[int]:
    """Run the enclosed parallel kernels on ``workers`` threads.

    Yields:
        The thread count actually in effect
    """
    limit = available_workers()
    effective = min(workers, limit)
    if effective != workers:
        logger.warning("Requested %d workers, numba allows %d; using %d", workers, limit, effective)
    previous = numba.get_num_threads()
    numba.set_num_threads(effective)
    try:
        yield effective
    finally:
        numba.set_num_threads(previous)
