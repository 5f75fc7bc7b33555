# TREC-style evaluation: MRR, NDCG@k, Recall@k
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.session_io import ScoredList

_SPEC_RE = re.compile(r"^(mrr|ndcg|recall)(?:@(\d+))?$")


@dataclass(frozen=True)
class MetricSpec:
    """A metric kind with its cutoff; NDCG and Recall need one, MRR may be uncut."""

    kind: str
    cutoff: int | None = None

    def __post_init__(self):
        if self.kind not in ("mrr", "ndcg", "recall"):
            raise ValueError(f"Unknown metric kind {self.kind!r}")
        if self.kind in ("ndcg", "recall") and self.cutoff is None:
            raise ValueError(f"{self.kind} needs a cutoff, e.g. {self.kind}@10")
        if self.cutoff is not None and self.cutoff < 1:
            raise ValueError(f"Metric cutoff must be >= 1, got {self.cutoff}")

    @property
    def name(self):
        return self.kind if self.cutoff is None else f"{self.kind}@{self.cutoff}"

    def __str__(self):
        return self.name


def parse_metric_spec(text):
    """Parse ``mrr``, ``mrr@10``, ``ndcg@3`` or ``recall@100`` (case-insensitive)."""
    match = _SPEC_RE.match(text.strip().lower())
    if not match:
        raise ValueError(f"Cannot parse metric {text!r}")
    kind, cutoff = match.groups()
    return MetricSpec(kind, int(cutoff) if cutoff else None)


def parse_metric_specs(text):
    return [parse_metric_spec(part) for part in text.split(",") if part.strip()]


_discounts = np.zeros(0)


def _discount_table(max_rank):
    """1 / log2(rank + 1) for ranks 0..max_rank (entry 0 unused), from math.log2."""
    global _discounts
    table = _discounts
    if len(table) <= max_rank:
        size = max(max_rank + 1, 2 * len(table))
        table = np.array([0.0] + [1.0 / math.log2(rank + 1) for rank in range(1, size)])
        _discounts = table
    # callers keep the local table; another thread may swap in a shorter one meanwhile
    return table


def _gain(grades, gain):
    grades = np.asarray(grades, dtype=np.float64)
    if gain == "exponential":
        return np.power(2.0, grades) - 1.0
    return grades


def ideal_dcg(judged_grades, k, gain="linear"):
    """IDCG@k from every judged grade of the topic, sorted descending."""
    positive = sorted((g for g in judged_grades if g > 0), reverse=True)[:k]
    if not positive:
        return 0.0
    gains = _gain(positive, gain)
    discounts = _discount_table(len(positive))
    total = 0.0
    for i, value in enumerate(gains, start=1):
        total += value * discounts[i]
    return total


def metric_from_ranks(spec, ranks, grades, judged_grades, rel_threshold=1, gain="linear"):
    """
    Evaluate one metric for many rankings of the same topic at once.

    Args:
        spec (MetricSpec): Metric to compute
        ranks (np.ndarray): (R, C) 1-based rank of each judged passage with
            grade > 0 under C rankings; 0 where the passage was not retrieved
        grades (Sequence[int]): (R,) grades of those passages
        judged_grades (Sequence[int]): All grades judged for the topic
        rel_threshold (int): Minimum grade for MRR/Recall relevance
        gain (str): ``linear`` or ``exponential`` NDCG gain

    Returns:
        np.ndarray: (C,) metric values; NaN for Recall of a topic with no relevant passage
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    n_rankings = ranks.shape[1]
    grades = np.asarray(grades, dtype=np.int64)
    limit = spec.cutoff
    retrieved = ranks > 0
    if limit is not None:
        retrieved &= ranks <= limit

    if spec.kind == "mrr":
        relevant = grades >= rel_threshold
        masked = np.where(retrieved & relevant[:, None], ranks, np.iinfo(np.int64).max)
        best = masked.min(axis=0) if len(grades) else np.full(n_rankings, np.iinfo(np.int64).max)
        found = best != np.iinfo(np.int64).max
        return np.where(found, 1.0 / np.where(found, best, 1), 0.0)

    if spec.kind == "recall":
        n_relevant = sum(1 for g in judged_grades if g >= rel_threshold)
        if n_relevant == 0:
            return np.full(n_rankings, np.nan)
        hits = (retrieved & (grades >= rel_threshold)[:, None]).sum(axis=0)
        return hits / n_relevant

    idcg = ideal_dcg(judged_grades, spec.cutoff, gain)
    if idcg == 0.0:
        return np.zeros(n_rankings)
    discounts = _discount_table(int(ranks.max(initial=0)))
    gains = _gain(grades, gain)
    dcg = np.zeros(n_rankings)
    # row-by-row accumulation keeps the summation order independent of C
    for r in range(len(grades)):
        dcg += np.where(retrieved[r], gains[r] * discounts[ranks[r]], 0.0)
    return dcg / idcg


def judged_ranks(scored_list, judged):
    """
    Ranks of the positively judged passages (sorted by passage id) in a list.

    Returns:
        tuple[np.ndarray, list[int]]: (R, 1) ranks (0 = not retrieved), grades
    """
    positions = {pid: rank for rank, pid in enumerate(scored_list.passage_ids(), start=1)}
    positive = sorted(pid for pid, grade in judged.items() if grade > 0)
    ranks = np.array([[positions.get(pid, 0)] for pid in positive], dtype=np.int64).reshape(len(positive), 1)
    return ranks, [judged[pid] for pid in positive]


def evaluate_list(spec, scored_list, qrels, rel_threshold=1, gain="linear"):
    judged = qrels.for_topic(scored_list.topic_id)
    ranks, grades = judged_ranks(scored_list, judged)
    return float(metric_from_ranks(spec, ranks, grades, list(judged.values()), rel_threshold, gain)[0])


def mrr(scored_list, qrels, rel_threshold=1, cutoff=None):
    """
    Reciprocal rank of the first passage with grade >= rel_threshold; 0 if none.
    """
    return evaluate_list(MetricSpec("mrr", cutoff), scored_list, qrels, rel_threshold)


def ndcg_at_k(scored_list, qrels, k, gain="linear"):
    """
    NDCG@k with log2 discount. IDCG uses every judged passage of the topic;
    a topic with no positive judgment scores 0. Unjudged passages count as grade 0.
    """
    return evaluate_list(MetricSpec("ndcg", k), scored_list, qrels, gain=gain)


def recall_at_k(scored_list, qrels, k, rel_threshold=1):
    """
    Fraction of relevant passages found in the top k.

    Returns NaN for a topic without relevant passages, so macro averages skip it.
    """
    return evaluate_list(MetricSpec("recall", k), scored_list, qrels, rel_threshold)


@dataclass
class EvaluationReport:
    """Per-topic metric table plus macro means."""

    per_topic: pd.DataFrame
    macro: dict[str, float]

    def to_csv(self):
        return self.per_topic.to_csv(float_format="%.6f")

    def to_json(self):
        return {
            "macro": self.macro,
            "per_topic": {
                topic: {name: (None if pd.isna(v) else float(v)) for name, v in row.items()}
                for topic, row in self.per_topic.iterrows()
            },
        }


def evaluate_run(run, qrels, specs, rel_threshold=1, gain="linear"):
    """
    Evaluate a run over every topic present in the qrels.

    A qrels topic missing from the run is scored on an empty list.

    Args:
        run (Mapping[str, ScoredList]): topic id -> list
        qrels (Qrels): Relevance judgments
        specs (Sequence[MetricSpec]): Metrics to compute

    Returns:
        EvaluationReport: per-topic values and macro means (NaN recall rows skipped)
    """
    rows = []
    for topic_id in qrels.topics():
        scored_list = run.get(topic_id, ScoredList(topic_id, "empty"))
        row = {"topic_id": topic_id}
        for spec in specs:
            row[spec.name] = evaluate_list(spec, scored_list, qrels, rel_threshold, gain)
        rows.append(row)
    columns = ["topic_id"] + [spec.name for spec in specs]
    per_topic = pd.DataFrame(rows, columns=columns).set_index("topic_id")
    macro = {}
    for spec in specs:
        mean = per_topic[spec.name].mean()
        macro[spec.name] = 0.0 if pd.isna(mean) else float(mean)
    return EvaluationReport(per_topic, macro)


def evaluate_by_level(report, levels):
    """
    Macro means grouped by personalization level.

    Args:
        report (EvaluationReport): Output of evaluate_run
        levels (Mapping[str, str]): topic id -> level label

    Returns:
        pandas.DataFrame: one row per level with a ``turns`` count column
    """
    table = report.per_topic.copy()
    table["level"] = [levels.get(topic_id, "?") for topic_id in table.index]
    grouped = table.groupby("level").mean(numeric_only=True)
    grouped.insert(0, "turns", table.groupby("level").size())
    return grouped.sort_index()


def format_report(report, title="EVALUATION SUMMARY"):
    """
    Format macro means as a console report.
    """
    output = [title, "=" * 40]
    output.append(f"  topics: {len(report.per_topic)}")
    for name, value in report.macro.items():
        output.append(f"  {name}: {value:.4f}")
    return "\n".join(output)
