# Baseline personalization-weight estimators for linear fusion
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from src.fusion import WeightVector, linear_fuse
from src.retrieval import tokenize

logger = logging.getLogger(__name__)

ESTIMATOR_METHODS = ("random", "equal", "entropy", "deps", "none")
DEGENERATE_TOLERANCE = 1e-12


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """
    Feature-hashed bag of words, L2-normalized.

    Tokens are hashed with blake2b so vectors are stable across processes.
    Text without tokens maps to the first basis vector.
    """

    def __init__(self, dim=256):
        if dim < 1:
            raise ValueError(f"Embedding dimension must be >= 1, got {dim}")
        self.dim = dim

    def _bucket(self, token):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text):
        vector = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            vector[self._bucket(token)] += 1.0
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            vector[0] = 1.0
            return vector
        return vector / norm


@dataclass(frozen=True)
class ProfileDistribution:
    """Probabilities over profile sentences; ``degenerate`` marks the uniform fallback."""

    probabilities: tuple[float, ...]
    degenerate: bool = False

    def __post_init__(self):
        if any(p < 0 for p in self.probabilities):
            raise ValueError("Probabilities must be non-negative")
        if self.probabilities and abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValueError(f"Probabilities sum to {sum(self.probabilities)}, expected 1")

    @property
    def K(self):
        return len(self.probabilities)


def random_weight(M, seed):
    """
    M uniform draws from [0, 1], renormalized to sum to 1.

    Args:
        M (int): Number of lists
        seed (int | Sequence[int]): Seed for numpy's default generator
    """
    draws = np.random.default_rng(seed).uniform(0.0, 1.0, M)
    total = draws.sum()
    if total == 0.0:
        return equal_weight(M)
    return WeightVector(tuple(float(d) for d in draws / total))


def equal_weight(M):
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    return WeightVector(tuple([1.0 / M] * M))


def _uniform(K):
    return ProfileDistribution(tuple([1.0 / K] * K), degenerate=True) if K else ProfileDistribution((), degenerate=True)


def profile_distribution(sentences, embedder):
    """
    Distribution over profile sentences from pairwise embedding similarity:

        p_k = (1 - mean_j v_k.v_j) / sum_i (1 - mean_j v_i.v_j)

    Profiles with K <= 1, or whose sentences are all identical (zero
    denominator), fall back to the uniform distribution marked degenerate.

    Returns:
        ProfileDistribution: p_1..p_K
    """
    K = len(sentences)
    if K <= 1:
        logger.warning("Profile with %d sentence(s): using the uniform fallback", K)
        return _uniform(K)
    vectors = np.stack([embedder.embed(sentence) for sentence in sentences])
    similarity = vectors @ vectors.T
    spread = np.clip(1.0 - similarity.mean(axis=1), 0.0, None)
    total = spread.sum()
    if total <= DEGENERATE_TOLERANCE:
        logger.warning("Profile sentences are indistinguishable: using the uniform fallback")
        return _uniform(K)
    return ProfileDistribution(tuple(float(p) for p in spread / total))


def entropy_weight(distribution, base=math.e):
    """
    Normalized Shannon entropy -sum p log p / log K, with 0 log 0 = 0.

    The normalization cancels the log base. K < 2 gives 0.

    Returns:
        float: w3 in [0, 1]
    """
    probabilities = distribution.probabilities
    K = len(probabilities)
    if K < 2:
        logger.warning("Entropy weight undefined for K=%d; using 0", K)
        return 0.0
    if max(probabilities) == min(probabilities):
        return 1.0
    entropy = -sum(p * math.log(p, base) for p in probabilities if p > 0)
    return min(1.0, max(0.0, entropy / math.log(K, base))) + 0.0


def logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


def deps_from_vectors(query_vector, passage_vectors):
    """
    w3 = logistic(|| q - agg ||_2) where agg is the re-normalized mean of the passage vectors.
    No passages gives logistic(0) = 0.5.
    """
    if len(passage_vectors) == 0:
        return 0.5
    aggregate = np.mean(np.asarray(passage_vectors, dtype=np.float64), axis=0)
    norm = np.linalg.norm(aggregate)
    if norm > 0.0:
        aggregate = aggregate / norm
    return logistic(float(np.linalg.norm(np.asarray(query_vector, dtype=np.float64) - aggregate)))


def deps_weight(personalized_text, non_personalized_list, corpus, embedder, top_k=10):
    """
    Personalization weight from the distance between the personalized query
    and the aggregate of the top passages retrieved without personalization.

    Args:
        personalized_text (str): q^u joined with r^u
        non_personalized_list (ScoredList): Ranking of q' joined with r'
        corpus (Mapping[str, str]): passage id -> text
        embedder (Embedder): Text encoder
        top_k (int): Passages in the aggregate

    Returns:
        float: w3 in [0.5, 1); 0.5 for an empty list
    """
    if not non_personalized_list.entries:
        logger.warning("Empty non-personalized list for %s; DEPS weight 0.5", non_personalized_list.topic_id)
        return 0.5
    passage_vectors = [embedder.embed(corpus.get(pid, "")) for pid in non_personalized_list.passage_ids()[:top_k]]
    return deps_from_vectors(embedder.embed(personalized_text), passage_vectors)


def estimator_to_vector(w3, M=3):
    """
    Spread the non-personalized mass 1 - w3 evenly over the other M - 1 lists.
    """
    if not 0.0 <= w3 <= 1.0:
        raise ValueError(f"w3 must be in [0, 1], got {w3}")
    rest = (1.0 - w3) / (M - 1)
    return WeightVector(tuple([rest] * (M - 1) + [w3]))


@dataclass
class TurnWeights:
    """Estimated weight vector of one turn with any fallback flags."""

    weights: WeightVector
    w3: float | None = None
    flags: list[str] = field(default_factory=list)


def estimate_turn_weights(method, bundles, sessions, lists_by_topic=None, corpus=None, embedder=None,
                          seed=0, deps_top_k=10, query_max_tokens=64, response_max_tokens=256):
    """
    Per-turn weight vectors from one of the baseline estimators.

    Args:
        method (str): random, equal, entropy, deps or none
        bundles (Sequence[ReformulationBundle]): Turns to estimate
        sessions (Sequence[ConversationSession]): Sessions holding the profiles
        lists_by_topic (Mapping[str, Sequence[ScoredList]]): Variant lists (deps only)
        corpus (Mapping[str, str]): Passage texts (deps only)

    Returns:
        dict[str, TurnWeights]: topic id -> weights
    """
    if method not in ESTIMATOR_METHODS:
        raise ValueError(f"Unknown estimator {method!r}; expected one of {ESTIMATOR_METHODS}")
    if method == "deps" and (lists_by_topic is None or corpus is None):
        raise ValueError("The deps estimator needs ranking lists and the corpus")
    embedder = embedder or HashingEmbedder()
    profiles = {}
    for session in sessions:
        for i in range(len(session.turns)):
            profiles[session.topic_id(i)] = session.user_profile

    estimates = {}
    entropy_cache = {}
    for index, bundle in enumerate(bundles):
        flags = []
        if method == "random":
            estimates[bundle.topic_id] = TurnWeights(random_weight(3, [seed, index]))
            continue
        if method == "equal":
            estimates[bundle.topic_id] = TurnWeights(equal_weight(3))
            continue
        if method == "none":
            w3 = 0.0
        elif method == "entropy":
            profile = tuple(profiles.get(bundle.topic_id, ()))
            if profile not in entropy_cache:
                distribution = profile_distribution(list(profile), embedder)
                entropy_cache[profile] = (entropy_weight(distribution), distribution)
            w3, distribution = entropy_cache[profile]
            if distribution.degenerate:
                flags.append("degenerate_profile")
            if distribution.K < 2:
                flags.append("short_profile")
        else:
            lists = lists_by_topic.get(bundle.topic_id)
            if lists is None:
                raise ValueError(f"No ranking lists for topic {bundle.topic_id}")
            personalized_text = bundle.retrieval_texts(query_max_tokens, response_max_tokens)[2]
            non_personalized = lists[1]
            if not non_personalized.entries:
                flags.append("empty_list")
            w3 = deps_weight(personalized_text, non_personalized, corpus, embedder, deps_top_k)
        estimates[bundle.topic_id] = TurnWeights(estimator_to_vector(w3), w3, flags)
    return estimates


def apply_turn_weights(estimates, lists_by_topic, depth=1000, run_tag="estimated"):
    """Fuse each turn's normalized lists with its own estimated weights."""
    final = {}
    for topic_id, estimate in estimates.items():
        lists = lists_by_topic.get(topic_id)
        if lists is None:
            raise ValueError(f"No ranking lists for topic {topic_id}")
        final[topic_id] = linear_fuse(estimate.weights, list(lists), depth=depth, run_tag=run_tag)
    return final


def dump_turn_weights(method, estimates):
    payload = {
        "method": method,
        "turns": {
            topic_id: {"weights": estimate.weights.as_list(), "w3": estimate.w3, "flags": estimate.flags}
            for topic_id, estimate in estimates.items()
        },
    }
    return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")
