"""Exact single-head attention over a voted key/value cache.

Scores are kept as raw exponentials ``exp(q.k / sqrt(d))`` rather than in
log space, because the merge rules consume both ``s`` and ``ln s``. Every entry
carries an integer vote count ``p`` and contributes ``p * s`` to the softmax.
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from kvlab.predictor import DEFAULT_WINDOW, EmaState

EXPONENT_LIMIT = 700.0


class DimensionError(ValueError):
    pass


class ExponentRangeError(ValueError):
    """A logit ``q.k / sqrt(d)`` fell outside ``[-700, 700]``."""


class EmptyCacheError(ValueError):
    pass


def as_vector(x, dim: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a finite 1-D float64 array, optionally of length ``dim``."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite components")
    return v


def _guarded_exp(logits: np.ndarray) -> np.ndarray:
    if logits.size and np.max(np.abs(logits)) > EXPONENT_LIMIT:
        worst = float(logits[np.argmax(np.abs(logits))])
        raise ExponentRangeError(f"logit {worst:.6g} outside +/-{EXPONENT_LIMIT}")
    return np.exp(logits)


def raw_score(q, k, d: int | None = None) -> float:
    """Unnormalized attention score ``exp(q.k / sqrt(d))``.

    ``d`` is the scaling dimension and defaults to the vector length.
    """
    q = as_vector(q)
    k = as_vector(k, q.shape[0])
    if d is None:
        d = q.shape[0]
    elif d < 1:
        raise DimensionError(f"scaling dimension must be positive, got {d}")
    logit = float(q @ k) / math.sqrt(d)
    return float(_guarded_exp(np.array([logit]))[0])


def raw_scores(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Vectorized :func:`raw_score` of one query against the rows of ``keys``."""
    return _guarded_exp(keys @ q / math.sqrt(keys.shape[1]))


@dataclass(eq=False)
class CacheEntry:
    key: np.ndarray
    value: np.ndarray
    votes: int = 1
    ema: EmaState = field(default_factory=EmaState)
    origin: frozenset = frozenset()
    # accumulated normalized attention, used by the cumulative selector
    attention_total: float = 0.0

    def copy(self) -> CacheEntry:
        return CacheEntry(
            self.key.copy(), self.value.copy(), self.votes, self.ema.copy(), self.origin, self.attention_total
        )


class KvCache:
    """Ordered cache entries of a single attention head.

    Appends go to the tail, merges replace the retained entry in place and
    evictions delete in place, so surviving entries never change order.
    """

    def __init__(self, dim: int, window: int = DEFAULT_WINDOW):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.window = window
        self.entries: list[CacheEntry] = []
        self.next_token = 0
        self._arrays: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[CacheEntry]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> CacheEntry:
        return self.entries[index]

    def append(self, k, v) -> CacheEntry:
        entry = CacheEntry(
            as_vector(k, self.dim),
            as_vector(v, self.dim),
            ema=EmaState(window=deque(maxlen=self.window)),
            origin=frozenset({self.next_token}),
        )
        self.next_token += 1
        self.entries.append(entry)
        self._arrays = None
        return entry

    def replace(self, index: int, entry: CacheEntry) -> None:
        self.entries[index] = entry
        self._arrays = None

    def delete(self, indices: Iterable[int]) -> None:
        drop = set(indices)
        self.entries = [e for i, e in enumerate(self.entries) if i not in drop]
        self._arrays = None

    def invalidate(self) -> None:
        """Drop cached arrays after entries were mutated directly."""
        self._arrays = None

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``(keys, values, votes)``; do not mutate the result."""
        if self._arrays is None:
            if not self.entries:
                empty = np.empty((0, self.dim))
                self._arrays = (empty, empty.copy(), np.empty(0, dtype=np.int64))
            else:
                self._arrays = (
                    np.stack([e.key for e in self.entries]),
                    np.stack([e.value for e in self.entries]),
                    np.array([e.votes for e in self.entries], dtype=np.int64),
                )
        return self._arrays

    @property
    def vote_sum(self) -> int:
        return sum(e.votes for e in self.entries)

    def copy(self) -> KvCache:
        new = KvCache(self.dim, self.window)
        new.entries = [e.copy() for e in self.entries]
        new.next_token = self.next_token
        return new


class Attention(NamedTuple):
    output: np.ndarray
    scores: np.ndarray
    attention: np.ndarray


def attend_arrays(keys: np.ndarray, values: np.ndarray, votes: np.ndarray, q: np.ndarray) -> Attention:
    """Voted attention ``sum(p s v) / sum(p s)`` over raw arrays."""
    if keys.shape[0] == 0:
        raise EmptyCacheError("cannot attend over an empty cache")
    scores = raw_scores(q, keys)
    mass = votes * scores
    attention = mass / mass.sum()
    return Attention(attention @ values, scores, attention)


def attend(cache: KvCache, q) -> Attention:
    """Attend over ``cache`` with query ``q``.

    Returns the output vector, the raw per-entry scores ``s_i`` and the
    normalized attention ``p_i s_i / sum_j p_j s_j``.
    """
    if len(cache) == 0:
        raise EmptyCacheError("cannot attend over an empty cache")
    keys, values, votes = cache.arrays()
    return attend_arrays(keys, values, votes, as_vector(q, cache.dim))


def append(cache: KvCache, k, v) -> CacheEntry:
    return cache.append(k, v)
