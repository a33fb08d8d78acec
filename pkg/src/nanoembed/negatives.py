"""False-negative filtering and hard-negative sampling over cosine rows.

Mining is a pure selection procedure on the current embedding values; no
gradients flow through it. A candidate is treated as a probable false
negative when its similarity to the query strictly exceeds the query's
positive similarity plus a margin beta. The remaining candidates are
ranked by descending similarity (ties broken by ascending index) and the
top k become hard negatives, cycling through the ranked list when fewer
than k are eligible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import EmbeddingBatch


class NoEligibleNegativesError(ValueError):
    """Every candidate was the positive or filtered; nothing to sample."""


@dataclass(frozen=True)
class MinerConfig:
    """Filtering margin, negatives per query, and the loss temperature."""

    beta: float = 0.1
    k: int = 8
    tau: float = 0.05
    exclude_other_positives: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass
class MinedBatch:
    """Per-query mining outcome over a shared candidate pool."""

    positive_indices: list[int]
    filtered: list[set[int]]
    negatives: list[list[int]]
    duplication_counts: list[int]
    k: int
    candidate_count: int


@dataclass(frozen=True)
class MinerStats:
    """Aggregates reported alongside a mined batch.

    false_neg_pct: percent of queries with a nonempty filtered set.
    hard_neg_pct: percent of the candidate pool each query keeps, 100*k/m.
    duplication_rate: fraction of queries that needed cyclic duplication.
    """

    false_neg_pct: float
    hard_neg_pct: float
    duplication_rate: float


def false_negative_threshold(sim_q_pos: float, beta: float) -> float:
    """The exclusion threshold: positive similarity shifted by beta."""
    return float(sim_q_pos) + float(beta)


def filter_false_negatives(sims: np.ndarray, positive_idx: int, alpha: float) -> set[int]:
    """Candidate indices whose similarity strictly exceeds alpha.

    The positive itself is never part of the filtered set. Candidates at
    exactly alpha survive.
    """
    sims = np.asarray(sims, dtype=np.float64).reshape(-1)
    if not 0 <= positive_idx < sims.size:
        raise IndexError(f"positive index {positive_idx} out of range for {sims.size} candidates")
    over = np.flatnonzero(sims > alpha)
    return {int(j) for j in over if j != positive_idx}


def sample_hard_negatives(
    sims: np.ndarray, positive_idx: int, filtered: set[int], k: int
) -> list[int]:
    """Top-k most similar eligible candidates, duplicated cyclically if short.

    Eligible means: not the positive and not filtered. Ranking is by
    descending similarity with ties broken by ascending index, so the
    result is deterministic for any input.
    """
    sims = np.asarray(sims, dtype=np.float64).reshape(-1)
    if not 0 <= positive_idx < sims.size:
        raise IndexError(f"positive index {positive_idx} out of range for {sims.size} candidates")
    mask = np.ones(sims.size, dtype=bool)
    mask[positive_idx] = False
    for j in filtered:
        if not 0 <= j < sims.size:
            raise IndexError(f"filtered index {j} out of range for {sims.size} candidates")
        mask[j] = False
    eligible = np.flatnonzero(mask)
    if eligible.size == 0:
        raise NoEligibleNegativesError("no eligible candidates remain after filtering")
    ranked = eligible[np.lexsort((eligible, -sims[eligible]))]
    if ranked.size >= k:
        picked = ranked[:k]
    else:
        reps = -(-k // ranked.size)
        picked = np.tile(ranked, reps)[:k]
    return [int(j) for j in picked]


def mine_batch(
    queries: EmbeddingBatch,
    candidates: EmbeddingBatch,
    positives: Sequence[int],
    config: MinerConfig,
) -> tuple[MinedBatch, MinerStats]:
    """Filter and sample for every query against a shared candidate pool."""
    if queries.dim != candidates.dim:
        raise ValueError(f"query dim {queries.dim} != candidate dim {candidates.dim}")
    n, m = len(queries), len(candidates)
    positives = [int(p) for p in positives]
    if len(positives) != n:
        raise ValueError(f"{len(positives)} positive indices for {n} queries")
    for pos in positives:
        if not 0 <= pos < m:
            raise IndexError(f"positive index {pos} out of range for {m} candidates")
    sims = queries.values @ candidates.values.T

    positive_set = set(positives)
    filtered_sets: list[set[int]] = []
    negative_lists: list[list[int]] = []
    duplication_counts: list[int] = []
    for i in range(n):
        pos = positives[i]
        row = sims[i]
        alpha = false_negative_threshold(row[pos], config.beta)
        filtered = filter_false_negatives(row, pos, alpha)
        excluded = set(filtered)
        if config.exclude_other_positives:
            excluded |= positive_set - {pos}
        negatives = sample_hard_negatives(row, pos, excluded, config.k)
        eligible = m - 1 - len(excluded)
        filtered_sets.append(filtered)
        negative_lists.append(negatives)
        duplication_counts.append(max(0, config.k - eligible))

    stats = MinerStats(
        false_neg_pct=100.0 * sum(1 for f in filtered_sets if f) / n,
        hard_neg_pct=config.k * 100.0 / m,
        duplication_rate=sum(1 for d in duplication_counts if d > 0) / n,
    )
    mined = MinedBatch(
        positive_indices=positives,
        filtered=filtered_sets,
        negatives=negative_lists,
        duplication_counts=duplication_counts,
        k=config.k,
        candidate_count=m,
    )
    return mined, stats
