from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager
from threading import Lock
from typing import Dict, Iterator, List, Optional


class StageTimer:
    """In-memory wall-clock aggregator keyed by pipeline stage."""

    def __init__(self):
        self.samples_ms: Dict[str, List[float]] = defaultdict(list)
        self._lock = Lock()

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.record(name, (time.perf_counter() - start) * 1000)

    def record(self, name: str, elapsed_ms: float):
        with self._lock:
            self.samples_ms[name].append(elapsed_ms)

    def snapshot_samples(self) -> Dict[str, List[float]]:
        with self._lock:
            return {name: list(values) for name, values in self.samples_ms.items()}

    @staticmethod
    def _percentile(values: List[float], percentile: float) -> Optional[float]:
        if not values:
            return None
        values = sorted(values)
        k = (len(values) - 1) * (percentile / 100)
        f = int(k)
        c = min(f + 1, len(values) - 1)
        if f == c:
            return values[int(k)]
        return values[f] + (values[c] - values[f]) * (k - f)

    def snapshot(self) -> Dict[str, float]:
        """Total ms per stage."""
        with self._lock:
            return {name: float(sum(values)) for name, values in sorted(self.samples_ms.items())}

    def summary(self) -> Dict[str, Dict[str, Optional[float]]]:
        samples = self.snapshot_samples()
        out: Dict[str, Dict[str, Optional[float]]] = {}
        for name in sorted(samples):
            values = samples[name]
            out[name] = {
                "count": float(len(values)),
                "avg_ms": sum(values) / len(values) if values else None,
                "p95_ms": self._percentile(values, 95),
            }
        return out
