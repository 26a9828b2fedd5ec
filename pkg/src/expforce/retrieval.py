"""Exact cosine-similarity retrieval over pool embeddings.

Linear scan and a full sort, nothing approximate. Pools here are a few
hundred records; determinism and auditability beat index structures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import AbstractSet, Mapping

import numpy as np

from .errors import DimensionMismatch, InvalidArgument
from .gateway import EmbeddingVector

log = logging.getLogger(__name__)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of the angle between two embeddings, clipped into [-1, 1]."""
    if a.d != b.d:
        raise DimensionMismatch(f"d={a.d} vs d={b.d}")
    value = float(np.dot(a.values, b.values)) / (a.norm() * b.norm())
    return min(1.0, max(-1.0, value))


@dataclass(frozen=True)
class ScoredExperience:
    record_id: str
    similarity: float


@dataclass(frozen=True)
class RetrievedSet:
    """Top-k result: entries sorted by similarity desc, ties by id asc."""

    query_id: str
    entries: tuple[ScoredExperience, ...]
    k_requested: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.k_requested < 0:
            raise InvalidArgument("k_requested must be non-negative")
        keys = [(-e.similarity, e.record_id) for e in self.entries]
        if keys != sorted(keys):
            raise InvalidArgument("entries must be sorted by similarity desc, then id asc")

    def record_ids(self) -> list[str]:
        return [e.record_id for e in self.entries]


def top_k(query_id: str, query: EmbeddingVector,
          pool_embeddings: Mapping[str, EmbeddingVector], k: int,
          exclude: AbstractSet[str] = frozenset()) -> RetrievedSet:
    """Rank every eligible pool embedding against the query and keep k.

    The query id itself and anything in exclude never appear in the result.
    k = 0 is legal and returns an empty set (the zero-shot case). Asking for
    more than the candidate count saturates with a warning rather than
    failing, since sweeps routinely overshoot small folds.
    """
    if k < 0:
        raise InvalidArgument("k must be non-negative")
    banned = set(exclude) | {query_id}
    scored = [
        ScoredExperience(rid, cosine_similarity(query, vec))
        for rid, vec in pool_embeddings.items()
        if rid not in banned
    ]
    scored.sort(key=lambda e: (-e.similarity, e.record_id))
    if k > len(scored):
        log.warning("top_k saturated for query %s: requested %d, only %d candidates",
                    query_id, k, len(scored))
    return RetrievedSet(query_id, tuple(scored[:k]), k_requested=k)
