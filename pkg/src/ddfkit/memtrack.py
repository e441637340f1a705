"""Allocation-tracking hook built on :mod:`tracemalloc` (numpy reports its buffers there)."""
from __future__ import annotations

import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass


@dataclass
class AllocationRecord:
    peak_bytes: int = 0
    retained_bytes: int = 0

    @property
    def transient_bytes(self) -> int:
        """Peak growth not accounted for by what the block kept alive (e.g. its output)."""
        return max(0, self.peak_bytes - self.retained_bytes)


@contextmanager
def track_allocations():
    """Measure peak traced memory growth inside the ``with`` block."""
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    base, _ = tracemalloc.get_traced_memory()
    tracemalloc.reset_peak()
    rec = AllocationRecord()
    try:
        yield rec
    finally:
        cur, peak = tracemalloc.get_traced_memory()
        rec.peak_bytes = peak - base
        rec.retained_bytes = max(0, cur - base)
        if started:
            tracemalloc.stop()
