"""Server request queue with a time window and a batch cap.

Clock-agnostic: callers pass ``now`` (ms) explicitly, so the same logic drives
the discrete-event simulator and the asyncio runtime.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable


@dataclass
class Batch:
    key: Hashable
    items: list[Any]
    arrivals: list[float]
    flushed_at: float
    reason: str  # "cap" or "window"

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class BatchQueue:
    """Pending requests grouped by key; a group flushes at ``max_batch`` items
    or once its oldest request has waited ``window_ms``."""

    max_batch: int = 5
    window_ms: float = 10.0
    _pending: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")

    def push(self, key: Hashable, item: Any, now: float) -> list[Batch]:
        items, arrivals = self._pending.setdefault(key, ([], []))
        items.append(item)
        arrivals.append(now)
        if len(items) >= self.max_batch:
            return [self._flush(key, now, "cap")]
        if now - arrivals[0] >= self.window_ms:
            return [self._flush(key, now, "window")]
        return []

    def deadline(self, key: Hashable) -> float | None:
        entry = self._pending.get(key)
        if not entry:
            return None
        return entry[1][0] + self.window_ms

    def next_deadline(self) -> float | None:
        ds = [self.deadline(k) for k in self._pending]
        return min(ds) if ds else None

    def due(self, now: float) -> list[Batch]:
        """Flush every group whose window has expired at ``now``."""
        out = []
        for key in list(self._pending):
            d = self.deadline(key)
            if d is not None and now >= d:
                out.append(self._flush(key, now, "window"))
        return out

    def pending_count(self, key: Hashable | None = None) -> int:
        if key is not None:
            return len(self._pending.get(key, ([], []))[0])
        return sum(len(v[0]) for v in self._pending.values())

    def oldest(self, key: Hashable):
        entry = self._pending.get(key)
        return entry[0][0] if entry else None

    def _flush(self, key: Hashable, now: float, reason: str) -> Batch:
        items, arrivals = self._pending.pop(key)
        return Batch(key, items, arrivals, now, reason)
