"""Allocation high-water-mark tracking for the memory-bound checks."""

from __future__ import annotations

import tracemalloc
from contextlib import contextmanager


class PeakMemory:
    """Holds the peak traced allocation in bytes after the context exits."""

    def __init__(self):
        self.peak_bytes = 0


@contextmanager
def track_peak_memory():
    """Track the numpy/Python allocation high-water mark inside the block."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    record = PeakMemory()
    try:
        yield record
    finally:
        _, peak = tracemalloc.get_traced_memory()
        record.peak_bytes = peak
        if not was_tracing:
            tracemalloc.stop()
