"""Uncertainty-weighted and jargon-reweighted relevance scoring on top of the full-query score.

    weighted addon     R  = sum_j w_j * cos(q_j, d)
    reweighted addon   RR = R + sum_k w_k * cos(j_k, d)
    total              = cos(full_query, d) + addon

Weights are used as given (no normalization), and sums accumulate in input order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding_index import Snippet, VectorIndex, cosine_sim
from .errors import EmptyIndex


class RetrievalMode(str, enum.Enum):
    BASE_ONLY = "base_only"
    WEIGHTED = "weighted"
    REWEIGHTED = "reweighted"


def _check_weight(weight: float) -> float:
    weight = float(weight)
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {weight}")
    return weight


@dataclass(frozen=True, eq=False)
class WeightedQueryPart:
    text: str
    weight: float
    vector: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight", _check_weight(self.weight))
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))

    @classmethod
    def embed(cls, text: str, weight: float, embedder) -> "WeightedQueryPart":
        return cls(text, weight, embedder.embed(text))


@dataclass(frozen=True, eq=False)
class JargonExpansion:
    term: str
    expansion: str
    weight: float
    vector: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight", _check_weight(self.weight))
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))

    @classmethod
    def embed(cls, term: str, expansion: str, weight: float, embedder) -> "JargonExpansion":
        return cls(term, expansion, weight, embedder.embed(expansion))


@dataclass(frozen=True, eq=False)
class QueryBundle:
    full_query_text: str
    full_query_vector: np.ndarray = field(repr=False)
    parts: tuple[WeightedQueryPart, ...] = ()
    jargon: tuple[JargonExpansion, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "full_query_vector", np.asarray(self.full_query_vector, dtype=np.float64))
        object.__setattr__(self, "parts", tuple(self.parts))
        object.__setattr__(self, "jargon", tuple(self.jargon))


@dataclass(frozen=True, eq=False)
class ScoredSnippet:
    snippet: Snippet
    base: float
    addon: float
    total: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "total", self.base + self.addon)


def weighted_relevance(parts: Sequence[WeightedQueryPart], doc_vector) -> float:
    total = 0.0
    for part in parts:
        total += part.weight * cosine_sim(part.vector, doc_vector)
    return total


def reweighted_relevance(
    parts: Sequence[WeightedQueryPart], jargon: Sequence[JargonExpansion], doc_vector
) -> float:
    score = weighted_relevance(parts, doc_vector)
    if not jargon:
        return score
    extra = 0.0
    for term in jargon:
        extra += term.weight * cosine_sim(term.vector, doc_vector)
    return score + extra


def addon_scores(index: VectorIndex, bundle: QueryBundle, mode: RetrievalMode | str) -> np.ndarray:
    """Vectorised addon term for every snippet in ``index``."""
    mode = RetrievalMode(mode)
    addon = np.zeros(len(index))
    if mode is RetrievalMode.BASE_ONLY:
        return addon
    for part in bundle.parts:
        addon = addon + part.weight * index.cosine_scores(part.vector)
    if mode is RetrievalMode.REWEIGHTED and bundle.jargon:
        extra = np.zeros(len(index))
        for term in bundle.jargon:
            extra = extra + term.weight * index.cosine_scores(term.vector)
        addon = addon + extra
    return addon


def score_all(index: VectorIndex, bundle: QueryBundle, mode: RetrievalMode | str) -> tuple[np.ndarray, np.ndarray]:
    """(base, addon) arrays over the whole index."""
    base = index.cosine_scores(bundle.full_query_vector)
    return base, addon_scores(index, bundle, mode)


def rank_with_addon(
    index: VectorIndex, bundle: QueryBundle, mode: RetrievalMode | str, k: int
) -> list[ScoredSnippet]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndex("index holds no snippets")
    base, addon = score_all(index, bundle, mode)
    totals = base + addon
    return [
        ScoredSnippet(index.snippets[i], float(base[i]), float(addon[i]))
        for i in index.rank(totals, k)
    ]
