# Per-level fusion weight fitting by exhaustive grid search over the simplex
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ValidationError

from src.errors import ParseError, SchemaError
from src.fusion import WeightVector, clip_unit, combine_scores, linear_fuse, stack_lists
from src.metrics import evaluate_list, metric_from_ranks, parse_metric_spec
from src.reformulate import PersonalizationLevel
from src.session_io import ScoredList, decode_utf8

logger = logging.getLogger(__name__)

LEVELS = tuple(level.value for level in PersonalizationLevel)
CANDIDATE_CHUNK = 1024


class FusionCase(NamedTuple):
    """One turn's M normalized ranking lists with the qrels to score them."""

    lists: list[ScoredList]
    qrels: object


def _grid_size(step):
    if not 0 < step <= 1:
        raise ValueError(f"Grid step must be in (0, 1], got {step}")
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"Grid step {step} does not divide 1 into an integer number of increments")
    return n


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def simplex_matrix(M, step):
    """
    All weight vectors with components in {0, step, ..., 1} summing to 1,
    in lexicographic order, as a (C, M) array.

    Raises:
        ValueError: If M < 2 or step does not divide 1
    """
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    n = _grid_size(step)
    counts = np.array(list(_compositions(n, M)), dtype=np.float64)
    return counts / n


def enumerate_simplex(M, step):
    """
    Enumerate the weight simplex grid.

    Args:
        M (int): Number of ranking lists (>= 2)
        step (float): Grid increment; 1/step must be an integer

    Returns:
        list[WeightVector]: Lexicographically ordered, exhaustive
    """
    return [WeightVector(tuple(float(w) for w in row)) for row in simplex_matrix(M, step)]


def _candidate_metric(case, weight_matrix, spec, depth, rel_threshold, gain):
    """Metric of one turn under every candidate weight vector (same result as linear_fuse + evaluate)."""
    topic_id = case.lists[0].topic_id if case.lists else ""
    judged = case.qrels.for_topic(topic_id)
    # Judged relevant passages of this turn
    n_candidates = weight_matrix.shape[0]
    positive = sorted(pid for pid, grade in judged.items() if grade > 0)
    grades = [judged[pid] for pid in positive]

    # Rank of each relevant passage under every candidate (0 = not retrieved)
    passage_ids, scores, present = stack_lists(case.lists)
    position = {pid: i for i, pid in enumerate(passage_ids)}
    ranks = np.zeros((len(positive), n_candidates), dtype=np.int64)
    if passage_ids and positive:
        fused = clip_unit(combine_scores(scores, weight_matrix))
        # kept where some list with positive weight retrieved the passage (as in linear_fuse)
        kept = (present.astype(np.float64) @ (weight_matrix > 0).T.astype(np.float64)) > 0
        index = np.arange(len(passage_ids))
        for r, pid in enumerate(positive):
            i = position.get(pid)
            if i is None:
                continue
            target = fused[i]
            ahead = (fused > target) | ((fused == target) & (index < i)[:, None])
            rank = (ahead & kept).sum(axis=0) + 1
            visible = kept[i] if depth is None else kept[i] & (rank <= depth)
            ranks[r] = np.where(visible, rank, 0)

    # Score every candidate at once
    values = metric_from_ranks(spec, ranks, grades, list(judged.values()), rel_threshold, gain)
    return np.nan_to_num(values, nan=0.0)


def grid_objectives(cases, weight_matrix, spec, depth=1000, rel_threshold=1, gain="linear", workers=1):
    """
    Sum over turns of the metric for every candidate weight vector.

    Candidates are split into chunks that may be evaluated concurrently;
    each chunk's values do not depend on the split.

    Returns:
        np.ndarray: (C,) objective per candidate
    """
    chunks = [weight_matrix[i:i + CANDIDATE_CHUNK] for i in range(0, len(weight_matrix), CANDIDATE_CHUNK)]

    def run_chunk(chunk):
        total = np.zeros(len(chunk))
        for case in cases:
            total += _candidate_metric(case, chunk, spec, depth, rel_threshold, gain)
        return total

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_chunk, chunks))
    else:
        parts = [run_chunk(chunk) for chunk in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def group_objective(weights, cases, spec, depth=1000, rel_threshold=1, gain="linear"):
    """Objective of a single weight vector, computed through linear_fuse and the metric functions."""
    total = 0.0
    for case in cases:
        fused = linear_fuse(weights, case.lists, depth=depth)
        value = evaluate_list(spec, fused, case.qrels, rel_threshold, gain)
        total += 0.0 if np.isnan(value) else value
    return total


@dataclass
class LevelWeightTable:
    """Fitted fusion weights per personalization level with fitting metadata."""

    levels: dict[str, WeightVector]
    metric: str = "ndcg@3"
    step: float = 0.01
    fitted_on: str | None = None
    unfitted: list[str] = field(default_factory=list)
    objectives: dict[str, float] = field(default_factory=dict)
    group_by: str = "level"

    def __post_init__(self):
        missing = [level for level in LEVELS if level not in self.levels]
        if missing:
            raise ValueError(f"Weight table is missing levels {missing}")

    def weights_for(self, level):
        return self.levels[PersonalizationLevel(level).value]

    def to_json(self):
        payload = {
            "metric": self.metric,
            "step": self.step,
            "fitted_on": self.fitted_on,
            "group_by": self.group_by,
            "levels": {level: self.levels[level].as_list() for level in LEVELS},
            "unfitted": sorted(self.unfitted),
            "objectives": {level: self.objectives[level] for level in sorted(self.objectives)},
        }
        return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")


class _WeightsFile(BaseModel):
    metric: str
    step: float
    levels: dict[str, list[float]]
    unfitted: list[str] = []
    fitted_on: str | None = None
    objectives: dict[str, float] = {}
    group_by: Literal["level", "none"] = "level"


def parse_weight_table(data):
    """
    Parse a weights.json document.

    Raises:
        ParseError: On invalid JSON
        SchemaError: On missing fields, missing levels or invalid vectors
    """
    data = decode_utf8(data)
    try:
        payload = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno, position=e.colno) from e
    try:
        document = _WeightsFile.model_validate(payload)
        levels = {level: WeightVector(tuple(weights)) for level, weights in document.levels.items()}
        return LevelWeightTable(
            levels=levels,
            metric=document.metric,
            step=document.step,
            fitted_on=document.fitted_on,
            unfitted=list(document.unfitted),
            objectives=dict(document.objectives),
            group_by=document.group_by,
        )
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first["loc"])
        raise SchemaError(f"{location}: {first['msg']}", field=location) from None
    except ValueError as e:
        raise SchemaError(str(e), field="levels") from None


GROUPINGS = ("level", "none")


def _check_cases(cases, n_lists):
    for case in cases:
        if len(case.lists) != n_lists:
            raise ValueError(f"Expected {n_lists} ranking lists per turn, got {len(case.lists)}")


def fit_level_weights(groups, metric="ndcg@3", step=0.01, depth=1000, rel_threshold=1, gain="linear",
                      workers=1, fitted_on=None, n_lists=3, group_by="level"):
    """
    Fit one weight vector per personalization level by grid search.

    For each level the objective is the sum over the level's turns of the
    metric of the linearly fused list; the best candidate wins and ties go to
    the lexicographically smallest vector. A level without turns gets equal
    weights and is reported as unfitted.

    With ``group_by="none"`` the levels are ignored: one vector is fitted on
    all turns pooled together and used for every level.

    Args:
        groups (Mapping[str, Sequence[FusionCase]]): level -> turns
        metric (str): Metric name such as ``ndcg@3``
        step (float): Grid increment
        depth (int): Fused list depth used during evaluation
        group_by (str): ``level`` or ``none``

    Returns:
        LevelWeightTable: Fitted table
    """
    if group_by not in GROUPINGS:
        raise ValueError(f"group_by must be one of {GROUPINGS}, got {group_by!r}")
    spec = parse_metric_spec(metric)
    candidates = simplex_matrix(n_lists, step)
    equal = WeightVector(tuple([1.0 / n_lists] * n_lists))

    # Pool the turns into the groups that each get their own vector
    if group_by == "none":
        pools = {"all": [FusionCase(*case) for level in LEVELS for case in groups.get(level, [])]}
    else:
        pools = {level: [FusionCase(*case) for case in groups.get(level, [])] for level in LEVELS}

    # Grid search every non-empty pool
    fitted = {}
    objectives = {}
    for name, cases in pools.items():
        if not cases:
            logger.warning("No turns for %s; using equal weights", name)
            continue
        _check_cases(cases, n_lists)
        scores = grid_objectives(cases, candidates, spec, depth, rel_threshold, gain, workers)
        best = int(np.argmax(scores))
        fitted[name] = WeightVector(tuple(float(w) for w in candidates[best]))
        objectives[name] = float(scores[best])
        logger.info("Group %s: %d turns, weights %s, %s sum %.4f", name, len(cases), fitted[name].as_list(), spec.name, scores[best])

    # Spread the fitted vectors over the levels
    if group_by == "none":
        levels = {level: fitted.get("all", equal) for level in LEVELS}
        unfitted = [] if "all" in fitted else list(LEVELS)
    else:
        levels = {level: fitted.get(level, equal) for level in LEVELS}
        unfitted = [level for level in LEVELS if level not in fitted]
    return LevelWeightTable(levels, metric=spec.name, step=step, fitted_on=fitted_on, unfitted=unfitted,
                            objectives=objectives, group_by=group_by)



def group_by_level(bundles, lists_by_topic, qrels):
    """
    Split turns into per-level groups of FusionCase (turns without judgments are skipped).

    Args:
        bundles (Iterable[ReformulationBundle]): Identified levels
        lists_by_topic (Mapping[str, Sequence[ScoredList]]): Normalized variant lists
        qrels (Qrels): Judgments for fitting
    """
    groups = {level: [] for level in LEVELS}
    for bundle in bundles:
        if not qrels.for_topic(bundle.topic_id):
            logger.debug("Skipping %s: no judgments", bundle.topic_id)
            continue
        if bundle.topic_id not in lists_by_topic:
            raise ValueError(f"No ranking lists for topic {bundle.topic_id}")
        groups[PersonalizationLevel(bundle.level).value].append(FusionCase(list(lists_by_topic[bundle.topic_id]), qrels))
    return groups


def apply_weights(table, bundles, lists_by_topic, depth=1000, run_tag="apcir"):
    """
    Fuse each turn's normalized lists with the weights of its identified level.

    Returns:
        dict[str, ScoredList]: topic id -> final list

    Raises:
        ValueError: If a turn has no ranking lists
    """
    final = {}
    for bundle in bundles:
        lists = lists_by_topic.get(bundle.topic_id)
        if lists is None:
            raise ValueError(f"No ranking lists for topic {bundle.topic_id}")
        weights = table.weights_for(bundle.level)
        final[bundle.topic_id] = linear_fuse(weights, list(lists), depth=depth, run_tag=run_tag)
    return final
