"""Bounded LRU store for image embeddings."""

from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Any


class EmbeddingCache:
    """Thread-safe LRU mapping image_id -> embedding.

    Inserting beyond capacity evicts the least-recently-used entry;
    both get and put count as use.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._lock = threading.Lock()
        self._entries: OrderedDict[str, Any] = OrderedDict()

    def put(self, image_id: str, embedding: Any) -> None:
        with self._lock:
            self._entries[image_id] = embedding
            self._entries.move_to_end(image_id)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def get(self, image_id: str) -> Any | None:
        with self._lock:
            embedding = self._entries.get(image_id)
            if embedding is not None:
                self._entries.move_to_end(image_id)
            return embedding

    def ids(self) -> list[str]:
        with self._lock:
            return list(self._entries)
