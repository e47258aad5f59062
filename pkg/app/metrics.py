from typing import Dict
from collections import defaultdict
from contextlib import contextmanager
import threading
import time

class MetricsCollector:
    def __init__(self):
        self.counters = defaultdict(int)
        self.timers = defaultdict(float)
        self.start_time = time.time()
        # replicate workers share the global instance
        self._lock = threading.Lock()

    def increment(self, metric_name: str, value: int = 1):
        """Increment a counter metric"""
        with self._lock:
            self.counters[metric_name] += value

    @contextmanager
    def timer(self, metric_name: str):
        """Accumulate wall time spent inside the block"""
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            with self._lock:
                self.timers[metric_name] += elapsed

    def get_metrics(self) -> Dict:
        """Get all metrics"""
        uptime_seconds = time.time() - self.start_time
        with self._lock:
            return {
                "counters": dict(sorted(self.counters.items())),
                "timers_seconds": dict(sorted(self.timers.items())),
                "uptime_seconds": uptime_seconds
            }

    def reset(self):
        with self._lock:
            self.counters.clear()
            self.timers.clear()
            self.start_time = time.time()

# Global metrics instance
metrics = MetricsCollector()
