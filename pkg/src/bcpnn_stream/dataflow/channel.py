"""Bounded FIFO channel with blocking backpressure and stall accounting."""

from __future__ import annotations

import threading
from collections import deque


class Aborted(Exception):
    """Raised inside a blocked stage when the pipeline is torn down."""


class Channel:
    """Single-producer, single-consumer FIFO holding at most ``capacity`` items.

    A put on a full channel and a get on an empty one block. Each blocking
    episode counts once toward ``write_stalls`` / ``read_stalls``. Items that
    are ``marker`` (end-of-stream) do not count as produced or consumed.
    """

    def __init__(self, name: str, capacity: int, marker=None):
        if capacity < 1:
            raise ValueError(f"channel {name}: capacity must be >= 1")
        self.name = name
        self.marker = marker
        self.capacity = capacity
        self._items = deque()
        self._cond = threading.Condition()
        self._aborted = False
        self.write_stalls = 0
        self.read_stalls = 0
        self.produced = 0
        self.consumed = 0
        self.high_water = 0

    @property
    def occupancy(self) -> int:
        return len(self._items)

    def put(self, item):
        with self._cond:
            if len(self._items) >= self.capacity:
                self.write_stalls += 1
                while len(self._items) >= self.capacity and not self._aborted:
                    self._cond.wait()
            if self._aborted:
                raise Aborted(self.name)
            self._items.append(item)
            if self.marker is None or item is not self.marker:
                self.produced += 1
            self.high_water = max(self.high_water, len(self._items))
            self._cond.notify_all()

    def get(self):
        with self._cond:
            if not self._items:
                self.read_stalls += 1
                while not self._items and not self._aborted:
                    self._cond.wait()
            if self._aborted:
                raise Aborted(self.name)
            item = self._items.popleft()
            if self.marker is None or item is not self.marker:
                self.consumed += 1
            self._cond.notify_all()
            return item

    def abort(self):
        with self._cond:
            self._aborted = True
            self._cond.notify_all()

    def __repr__(self):
        return f"Channel({self.name!r}, {self.occupancy}/{self.capacity})"
