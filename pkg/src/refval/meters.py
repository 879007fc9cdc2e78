"""Wall-clock and peak-RSS measurement for method comparisons.

Peak memory is the maximum process resident set size observed by a sampler
thread polling every 100 ms (plus a final reading), standing in for a
device-level memory meter.
"""

from __future__ import annotations

import threading
import time

import psutil


class ResourceMeter:
    """Context manager: `with ResourceMeter() as m: ...` then m.wall_time_s / m.peak_rss_bytes."""

    def __init__(self, interval_s: float = 0.1):
        self.interval_s = interval_s
        self.wall_time_s = 0.0
        self.peak_rss_bytes = 0
        self._stop = threading.Event()
        self._proc = psutil.Process()

    def _sample(self):
        while not self._stop.is_set():
            self.peak_rss_bytes = max(self.peak_rss_bytes, self._proc.memory_info().rss)
            self._stop.wait(self.interval_s)

    def __enter__(self):
        self.peak_rss_bytes = self._proc.memory_info().rss
        self._stop.clear()
        self._thread = threading.Thread(target=self._sample, daemon=True)
        self._start = time.perf_counter()
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.wall_time_s = time.perf_counter() - self._start
        self._stop.set()
        self._thread.join()
        self.peak_rss_bytes = max(self.peak_rss_bytes, self._proc.memory_info().rss)
        return False
