from __future__ import annotations

import heapq
import itertools
from typing import Any


class EventOrderError(RuntimeError):
    pass


class EventQueue:
    """Min-queue of ``(timestamp, sequence, event)``.

    Ties on timestamp pop in insertion order, so a fixed seed and scenario
    give the same pop sequence every time.
    """

    def __init__(self):
        self._heap: list[tuple[float, int, Any]] = []
        self._seq = itertools.count()
        self.now: float = 0.0

    def __len__(self):
        return len(self._heap)

    def __bool__(self):
        return bool(self._heap)

    def push(self, timestamp: float, event: Any) -> None:
        if timestamp < self.now:
            raise EventOrderError(f"event at {timestamp} scheduled before current time {self.now}")
        heapq.heappush(self._heap, (timestamp, next(self._seq), event))

    def pop(self) -> tuple[float, Any]:
        timestamp, _, event = heapq.heappop(self._heap)
        self.now = timestamp
        return timestamp, event

    def peek_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None
