"""Counting allocator for tensor buffers.

Only buffers owned by tensors (forward outputs, arrays saved for the
backward pass, and gradient buffers of non-leaf nodes) are counted.
Kernel-local temporaries that never outlive an op are not.
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager

import numpy as np

_ACTIVE: "MemoryTracker | None" = None


def _root(arr: np.ndarray) -> np.ndarray:
    while isinstance(arr.base, np.ndarray):
        arr = arr.base
    return arr


class MemoryTracker:
    """Tracks live and peak bytes of registered arrays."""

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0
        self.allocations = 0
        self._live: dict[int, int] = {}

    def register(self, arr: np.ndarray) -> None:
        if not isinstance(arr, np.ndarray):
            return
        root = _root(arr)
        key = id(root)
        if key in self._live:
            return
        nbytes = int(root.nbytes)
        self._live[key] = nbytes
        self.current += nbytes
        self.allocations += 1
        if self.current > self.peak:
            self.peak = self.current
        weakref.finalize(root, self._release, key, nbytes)

    def _release(self, key: int, nbytes: int) -> None:
        if self._live.pop(key, None) is not None:
            self.current -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.current


def register(arr) -> None:
    if _ACTIVE is not None:
        _ACTIVE.register(arr)


def active_tracker() -> "MemoryTracker | None":
    return _ACTIVE


@contextmanager
def track_memory():
    """Count tensor-buffer bytes allocated inside the block.

    >>> with track_memory() as mem:
    ...     pass
    >>> mem.peak
    0
    """
    global _ACTIVE
    prev = _ACTIVE
    tracker = MemoryTracker()
    _ACTIVE = tracker
    try:
        yield tracker
    finally:
        _ACTIVE = prev
