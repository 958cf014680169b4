"""
Replicate Pool for kernel_lab

Runs independent Monte Carlo replicates (seeds, permutations, per-parameter
quadrature problems) on a thread pool and hands results back in submission
order, so aggregation is identical to a serial run.

Features:
- Thread pool executor for concurrent replicate evaluation
- Ordered results regardless of completion order
- Serial fallback when max_workers <= 1
- Replicate statistics and clean shutdown

Usage:
    with ReplicatePool(max_workers=4, name="calib") as pool:
        values = pool.map_ordered(run_one, seeds)

numpy releases the GIL inside BLAS/LAPACK and FFT calls, which is where the
replicates spend their time.
"""
import concurrent.futures
import logging
import os
import threading
from typing import Any, Callable, Dict, Iterable, List, Optional

logger = logging.getLogger(__name__)

WORKERS_ENV = 'KERNEL_LAB_WORKERS'


def default_workers() -> int:
    """Worker count from KERNEL_LAB_WORKERS (default 1, i.e. serial)"""
    raw = os.getenv(WORKERS_ENV, '1')
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring non-integer {WORKERS_ENV}={raw!r}; running serially")
        return 1


class ReplicatePool:
    """
    Ordered parallel map over replicate indices

    Args:
        max_workers: number of threads; <= 1 evaluates in the calling thread
        name: thread name prefix, shown in log records
    """

    def __init__(self, max_workers: Optional[int] = None, name: str = "Replicate"):
        self.max_workers = default_workers() if max_workers is None else max(1, int(max_workers))
        self.name = name
        self.executor: Optional[concurrent.futures.ThreadPoolExecutor] = None
        self._lock = threading.Lock()

        # Statistics
        self.submitted = 0
        self.completed = 0
        self.failed = 0

        logger.debug(f"ReplicatePool '{name}' initialized with {self.max_workers} workers")

    @property
    def is_serial(self) -> bool:
        return self.max_workers <= 1

    def _ensure_executor(self) -> concurrent.futures.ThreadPoolExecutor:
        if self.executor is None:
            self.executor = concurrent.futures.ThreadPoolExecutor(
                max_workers=self.max_workers,
                thread_name_prefix=self.name
            )
        return self.executor

    def _record(self, ok: bool):
        with self._lock:
            if ok:
                self.completed += 1
            else:
                self.failed += 1

    def _run_one(self, func: Callable, item: Any) -> Any:
        try:
            result = func(item)
        except Exception:
            self._record(False)
            raise
        self._record(True)
        return result

    def map_ordered(self, func: Callable[[Any], Any], items: Iterable[Any]) -> List[Any]:
        """
        Apply func to every item and return results in item order

        The first failing replicate's exception is re-raised after all
        submitted work has finished.
        """
        items = list(items)
        with self._lock:
            self.submitted += len(items)
        if self.is_serial:
            return [self._run_one(func, item) for item in items]

        executor = self._ensure_executor()
        futures = [executor.submit(self._run_one, func, item) for item in items]
        concurrent.futures.wait(futures)
        return [f.result() for f in futures]

    def get_statistics(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'max_workers': self.max_workers,
            'submitted': self.submitted,
            'completed': self.completed,
            'failed': self.failed,
        }

    def is_healthy(self) -> bool:
        return self.failed == 0

    def shutdown(self):
        if self.executor is not None:
            self.executor.shutdown(wait=True)
            self.executor = None
            logger.debug(f"ReplicatePool '{self.name}' shut down")

    def __enter__(self) -> 'ReplicatePool':
        return self

    def __exit__(self, exc_type, exc, tb):
        self.shutdown()
        return False
