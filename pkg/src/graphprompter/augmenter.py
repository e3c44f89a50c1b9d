"""Fixed-capacity LFU cache of pseudo-labelled query embeddings.

Not thread-safe: the inference loop is the only writer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class CacheEntry:
    embedding: np.ndarray
    label: int
    confidence: float
    frequency: int
    tick: int
    key: str = ""


class PromptCache:
    """LFU store; eviction takes the lowest frequency, then the oldest tick."""

    def __init__(self, capacity: int = 3, admit_floor: float = 0.5, touch_k: int = 1):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        if touch_k < 1:
            raise ValueError(f"touch_k must be >= 1, got {touch_k}")
        self.capacity = capacity
        self.admit_floor = admit_floor
        self.touch_k = touch_k
        self.entries: list[CacheEntry] = []
        self.clock = 0

    def __len__(self) -> int:
        return len(self.entries)

    def _tick(self) -> int:
        self.clock += 1
        return self.clock

    def victim(self) -> int:
        return min(range(len(self.entries)),
                   key=lambda i: (self.entries[i].frequency, self.entries[i].tick))

    def admit(self, embedding, label: int, confidence: float, key: str = "") -> CacheEntry | None:
        """Insert one entry with frequency 1, evicting if full; returns the evictee."""
        if not 0.0 <= confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {confidence}")
        if self.capacity == 0:
            return None
        evicted = None
        if len(self.entries) >= self.capacity:
            evicted = self.entries.pop(self.victim())
        self.entries.append(CacheEntry(np.array(embedding, dtype=np.float64), int(label),
                                       float(confidence), 1, self._tick(), key))
        return evicted

    def admit_batch(self, embeddings, labels: Sequence[int], confidences: Sequence[float],
                    keys: Sequence[str] | None = None) -> list[int]:
        """Admit the most confident query per predicted class, above the floor.

        Returns the batch positions that were admitted, in admission order
        (classes ascending).
        """
        best: dict[int, int] = {}
        for i, (y, conf) in enumerate(zip(labels, confidences)):
            if conf < self.admit_floor:
                continue
            j = best.get(int(y))
            if j is None or conf > confidences[j]:
                best[int(y)] = i
        admitted = []
        for y in sorted(best):
            i = best[y]
            self.admit(embeddings[i], y, float(confidences[i]), keys[i] if keys else "")
            admitted.append(i)
        return admitted if self.capacity else []

    def touch(self, queries, k: int | None = None) -> np.ndarray:
        """Each query hits its top-k entries by cosine; returns per-entry hits."""
        k = self.touch_k if k is None else k
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        hits = np.zeros(len(self.entries), dtype=np.int64)
        if not self.entries:
            return hits
        Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if Q.shape[0] == 0:
            return hits
        E = np.stack([e.embedding for e in self.entries])
        sim = ag.cosine_similarity(Tensor(Q), Tensor(E)).data
        for row in sim:
            for i in np.argsort(-row, kind="stable")[:k]:
                entry = self.entries[i]
                entry.frequency += 1
                entry.tick = self._tick()
                hits[i] += 1
        return hits

    def reset(self) -> None:
        self.entries.clear()
        self.clock = 0

    def snapshot(self) -> list[tuple[int, int, int, str]]:
        return [(e.label, e.frequency, e.tick, e.key) for e in self.entries]


def augment_prompt_set(selected: Sequence[tuple[np.ndarray, int]], cache: PromptCache,
                       classes: Sequence[int]) -> list[tuple[np.ndarray, int]]:
    """Selected (embedding, class) prompts plus cache entries of episode classes."""
    keep = set(int(c) for c in classes)
    extra = [(e.embedding, e.label) for e in cache.entries if e.label in keep]
    return list(selected) + extra
