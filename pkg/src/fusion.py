# Ranking-list normalization and fusion
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.session_io import ScoredList

WEIGHT_SUM_TOLERANCE = 1e-9
DEGENERATE_SCORE = 0.5


@dataclass(frozen=True)
class WeightVector:
    """Fusion weights w_1..w_M: each in [0, 1], summing to 1."""

    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.weights:
            raise ValueError("A weight vector needs at least one component")
        for w in self.weights:
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"Weight {w} outside [0, 1]")
        if abs(sum(self.weights) - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ValueError(f"Weights sum to {sum(self.weights)}, expected 1")

    @classmethod
    def of(cls, *weights):
        return cls(tuple(float(w) for w in weights))

    def as_list(self):
        return list(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, index):
        return self.weights[index]


def minmax_normalize(scored_list):
    """
    Min-max normalize a ranking list to [0, 1].

    When every score is equal (including a single entry) each score becomes 0.5.

    Args:
        scored_list (ScoredList): Raw retrieval scores

    Returns:
        ScoredList: Same passages, normalized scores, same order
    """
    if not scored_list.entries:
        return scored_list
    scores = scored_list.scores()
    s_min, s_max = min(scores), max(scores)
    if s_max == s_min:
        normalized = [(pid, DEGENERATE_SCORE) for pid, _ in scored_list.entries]
    else:
        span = s_max - s_min
        normalized = [(pid, (score - s_min) / span) for pid, score in scored_list.entries]
    return ScoredList.from_scores(scored_list.topic_id, scored_list.run_tag, normalized)


def combine_scores(score_matrix, weight_matrix):
    """
    Weighted sums for many weight vectors at once.

    Args:
        score_matrix (np.ndarray): (n_passages, M) normalized scores, 0 where absent
        weight_matrix (np.ndarray): (n_candidates, M) weight vectors

    Returns:
        np.ndarray: (n_passages, n_candidates) fused scores
    """
    n_lists = score_matrix.shape[1]
    fused = np.zeros((score_matrix.shape[0], weight_matrix.shape[0]), dtype=np.float64)
    # accumulate list by list so every path sums in the same order (bit-identical results)
    for m in range(n_lists):
        fused += np.outer(score_matrix[:, m], weight_matrix[:, m])
    return fused


def clip_unit(fused):
    """Clamp fused linear scores to [0, 1]; float sums of weights can overshoot 1 by an ulp."""
    return np.clip(fused, 0.0, 1.0)


def stack_lists(lists):
    """
    Align M ranking lists on the sorted union of their passages.

    Returns:
        tuple[list[str], np.ndarray, np.ndarray]: passage ids (ascending),
        (n, M) score matrix with 0 for absent passages, (n, M) presence mask
    """
    passage_ids = sorted({pid for scored_list in lists for pid, _ in scored_list.entries})
    position = {pid: i for i, pid in enumerate(passage_ids)}
    scores = np.zeros((len(passage_ids), len(lists)), dtype=np.float64)
    present = np.zeros((len(passage_ids), len(lists)), dtype=bool)
    for m, scored_list in enumerate(lists):
        for pid, score in scored_list.entries:
            scores[position[pid], m] = score
            present[position[pid], m] = True
    return passage_ids, scores, present


def _common_topic(lists):
    topics = {scored_list.topic_id for scored_list in lists}
    if len(topics) > 1:
        raise ValueError(f"Cannot fuse lists of different topics: {sorted(topics)}")
    return topics.pop() if topics else ""


def _ranked(topic_id, run_tag, passage_ids, fused, keep, depth):
    # passage_ids ascend, so the stable sort breaks score ties by passage id
    candidates = np.flatnonzero(keep)
    order = np.argsort(-fused[candidates], kind="stable")
    if depth is not None:
        order = order[:depth]
    entries = tuple((passage_ids[i], float(fused[i]) + 0.0) for i in candidates[order])
    return ScoredList(topic_id, run_tag, entries)


def _weighted_fuse(weights, lists, depth, run_tag, clip=False):
    if len(weights) != len(lists):
        raise ValueError(f"Got {len(weights)} weights for {len(lists)} ranking lists")
    # Align the lists on their passage union
    topic_id = _common_topic(lists)
    passage_ids, scores, present = stack_lists(lists)
    # Weighted sum
    weight_row = np.asarray([list(weights)], dtype=np.float64)
    fused = combine_scores(scores, weight_row)[:, 0]
    if clip:
        fused = clip_unit(fused)
    # a passage is kept only if a list with positive weight retrieved it
    keep = (present & (weight_row[0] > 0)).any(axis=1)
    return _ranked(topic_id, run_tag, passage_ids, fused, keep, depth)


def linear_fuse(weights, lists, depth=1000, run_tag="linear"):
    """
    Linear combination of min-max normalized lists: sum_m w_m * s_m(p).

    A passage absent from list m contributes 0 for that list. Passages that
    only appear in zero-weight lists are left out, so a corner vector e_m
    reproduces list m exactly.
    Fused scores are clipped to [0, 1].

    Args:
        weights (WeightVector): One weight per list
        lists (Sequence[ScoredList]): Normalized lists of the same topic
        depth (int | None): Output depth
        run_tag (str): Tag of the fused list

    Raises:
        ValueError: If the weight count differs from the list count
    """
    return _weighted_fuse(weights, lists, depth, run_tag, clip=True)


def combsum_fuse(lists, depth=1000, run_tag="combsum"):
    """Sum of normalized scores with unit weight per list."""
    return _weighted_fuse([1.0] * len(lists), lists, depth, run_tag)


def rrf_fuse(lists, k=60.0, depth=1000, run_tag="rrf"):
    """
    Reciprocal rank fusion: score(p) = sum over lists of 1 / (k + rank), 1-based ranks.

    Raises:
        ValueError: If there are no lists or k <= 0
    """
    if not lists:
        raise ValueError("rrf_fuse needs at least one ranking list")
    if k <= 0:
        raise ValueError(f"RRF k must be positive, got {k}")
    topic_id = _common_topic(lists)
    fused: dict[str, float] = {}
    for scored_list in lists:
        for rank, (pid, _) in enumerate(scored_list.entries, start=1):
            fused[pid] = fused.get(pid, 0.0) + 1.0 / (k + rank)
    result = ScoredList.from_scores(topic_id, run_tag, fused)
    return result.truncated(depth) if depth is not None else result


def round_robin_fuse(lists, depth=1000, run_tag="rr"):
    """
    Interleave the lists head by head in list order, skipping passages
    already emitted. Output scores are 1/position.

    Raises:
        ValueError: If there are no lists
    """
    if not lists:
        raise ValueError("round_robin_fuse needs at least one ranking list")
    topic_id = _common_topic(lists)
    emitted = []
    seen = set()
    longest = max(len(scored_list) for scored_list in lists)
    for i in range(longest):
        for scored_list in lists:
            if i < len(scored_list):
                pid = scored_list.entries[i][0]
                if pid not in seen:
                    seen.add(pid)
                    emitted.append(pid)
    if depth is not None:
        emitted = emitted[:depth]
    entries = tuple((pid, 1.0 / position) for position, pid in enumerate(emitted, start=1))
    return ScoredList(topic_id, run_tag, entries)


FUSION_STRATEGIES = ("linear", "rrf", "rr", "combsum")


def fuse_runs(runs, strategy, weights=None, rrf_k=60.0, depth=1000, run_tag=None):
    """
    Fuse whole runs topic by topic.

    Args:
        runs (Sequence[Mapping[str, ScoredList]]): One run per query variant
        strategy (str): One of linear, rrf, rr, combsum
        weights (WeightVector | None): Required for linear
        rrf_k (float): RRF constant
        depth (int): Output depth per topic

    Returns:
        dict[str, ScoredList]: topic id -> fused list
    """
    if strategy not in FUSION_STRATEGIES:
        raise ValueError(f"Unknown fusion strategy {strategy!r}; expected one of {FUSION_STRATEGIES}")
    if strategy == "linear" and weights is None:
        raise ValueError("Linear fusion needs a weight vector")
    run_tag = run_tag or strategy
    fused = {}
    # Fuse topic by topic; a run without the topic contributes an empty list
    for topic_id in sorted({t for run in runs for t in run}):
        lists = [run.get(topic_id, ScoredList(topic_id, "missing")) for run in runs]
        if strategy == "linear":
            fused[topic_id] = linear_fuse(weights, [minmax_normalize(sl) for sl in lists], depth, run_tag)
        elif strategy == "combsum":
            fused[topic_id] = combsum_fuse([minmax_normalize(sl) for sl in lists], depth, run_tag)
        elif strategy == "rrf":
            fused[topic_id] = rrf_fuse(lists, k=rrf_k, depth=depth, run_tag=run_tag)
        else:
            fused[topic_id] = round_robin_fuse(lists, depth=depth, run_tag=run_tag)
    return fused
