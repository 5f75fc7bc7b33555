import math
import random

import numpy as np
import pytest

from src.estimators import (
    HashingEmbedder,
    ProfileDistribution,
    apply_turn_weights,
    deps_from_vectors,
    deps_weight,
    dump_turn_weights,
    entropy_weight,
    equal_weight,
    estimate_turn_weights,
    estimator_to_vector,
    logistic,
    profile_distribution,
    random_weight,
)
from src.reformulate import ReformulationBundle
from src.session_io import ConversationSession, ScoredList, Turn


class TableEmbedder:
    """Looks sentences up in a fixed table of unit vectors."""

    def __init__(self, table):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.dim = len(next(iter(self.table.values())))

    def embed(self, text):
        return self.table[text]


def session(profile, n_turns=2, session_id="s1"):
    turns = tuple(Turn(turn_id=i + 1, utterance=f"question {i}") for i in range(n_turns))
    return ConversationSession(session_id=session_id, user_profile=tuple(profile), turns=turns)


def bundle(topic_id, level="b"):
    return ReformulationBundle(topic_id=topic_id, level=level, q_prime="vegan recipes", r_prime="tofu",
                               q_user="vegan recipes for runners", r_user="protein")


def test_random_weight_is_seeded_and_normalized():
    first = random_weight(3, 5)
    assert first == random_weight(3, 5)
    assert first != random_weight(3, 6)
    assert sum(first) == pytest.approx(1.0)
    assert all(0.0 <= w <= 1.0 for w in first)


def test_random_weight_components_average_one_third():
    draws = np.array([random_weight(3, seed).as_list() for seed in range(100)])
    assert np.allclose(draws.mean(axis=0), 1 / 3, atol=0.05)


@pytest.mark.parametrize("M", [1, 3, 4])
def test_equal_weight(M):
    assert equal_weight(M).as_list() == pytest.approx([1 / M] * M)


def test_equal_weight_rejects_zero():
    with pytest.raises(ValueError):
        equal_weight(0)


def test_profile_distribution_orthogonal_pair():
    embedder = TableEmbedder({"x": [1, 0], "y": [0, 1]})
    dist = profile_distribution(["x", "y"], embedder)
    assert dist.probabilities == pytest.approx((0.5, 0.5))
    assert not dist.degenerate


def test_profile_distribution_identical_sentences_is_degenerate():
    embedder = HashingEmbedder()
    dist = profile_distribution(["I like tea."] * 3, embedder)
    assert dist.degenerate
    assert dist.probabilities == pytest.approx((1 / 3,) * 3)
    assert entropy_weight(dist) == 1.0


def test_profile_distribution_outlier_gets_more_mass():
    embedder = TableEmbedder({"a": [1, 0, 0], "b": [1, 0, 0], "c": [0, 0, 1]})
    dist = profile_distribution(["a", "b", "c"], embedder)
    assert dist.probabilities[2] > dist.probabilities[0]
    assert dist.probabilities[0] == pytest.approx(dist.probabilities[1])
    assert sum(dist.probabilities) == pytest.approx(1.0)


@pytest.mark.parametrize("K", [0, 1])
def test_short_profile_is_degenerate(K):
    dist = profile_distribution(["only"] * K, HashingEmbedder())
    assert dist.degenerate
    assert dist.K == K
    assert entropy_weight(dist) == 0.0


def test_entropy_uniform_is_one():
    assert entropy_weight(ProfileDistribution((0.25,) * 4)) == 1.0


def test_entropy_point_mass_is_zero():
    assert entropy_weight(ProfileDistribution((1.0, 0.0, 0.0))) == 0.0


def test_entropy_worked_example():
    value = entropy_weight(ProfileDistribution((0.5, 0.25, 0.25)))
    assert value == pytest.approx(1.5 / math.log2(3), abs=1e-12)
    assert value == pytest.approx(0.9464, abs=1e-4)


def test_entropy_independent_of_log_base():
    rng = random.Random(4)
    for _ in range(20):
        raw = [rng.random() for _ in range(rng.randint(2, 8))]
        dist = ProfileDistribution(tuple(r / sum(raw) for r in raw))
        assert entropy_weight(dist, base=2) == pytest.approx(entropy_weight(dist), abs=1e-12)
        assert 0.0 <= entropy_weight(dist) <= 1.0


def test_profile_distribution_rejects_bad_probabilities():
    with pytest.raises(ValueError):
        ProfileDistribution((0.7, 0.7))
    with pytest.raises(ValueError):
        ProfileDistribution((1.5, -0.5))


def test_hashing_embedder_unit_norm_and_stable():
    embedder = HashingEmbedder(dim=64)
    vector = embedder.embed("Vegan recipes for marathon runners")
    assert np.linalg.norm(vector) == pytest.approx(1.0)
    assert np.array_equal(vector, HashingEmbedder(dim=64).embed("Vegan recipes for marathon runners"))
    empty = embedder.embed("")
    assert empty[0] == 1.0 and empty.sum() == 1.0
    with pytest.raises(ValueError):
        HashingEmbedder(dim=0)


def test_deps_zero_distance_is_one_half():
    q = np.array([0.6, 0.8, 0.0])
    assert deps_from_vectors(q, [q, q]) == pytest.approx(0.5, abs=1e-12)


def test_deps_empty_passages_is_one_half():
    assert deps_from_vectors(np.array([1.0, 0.0]), []) == 0.5


def test_deps_toy_vectors():
    q = np.array([1.0, 0.0, 0.0])
    passages = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
    aggregate = np.array([1.0, 1.0, 0.0]) / math.sqrt(2)
    expected = 1.0 / (1.0 + math.exp(-float(np.linalg.norm(q - aggregate))))
    assert deps_from_vectors(q, passages) == pytest.approx(expected, abs=1e-12)
    assert deps_from_vectors(q, passages) == pytest.approx(logistic(0.7653668647), abs=1e-9)


def test_deps_monotone_in_distance():
    rng = np.random.default_rng(5)
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        near, far = rng.normal(size=4), rng.normal(size=4)
        near /= np.linalg.norm(near)
        far /= np.linalg.norm(far)
        d_near, d_far = np.linalg.norm(q - near), np.linalg.norm(q - far)
        w_near, w_far = deps_from_vectors(q, [near]), deps_from_vectors(q, [far])
        if d_near < d_far:
            assert w_near <= w_far
        else:
            assert w_near >= w_far
        assert 0.5 <= w_near < 1.0


def test_deps_weight_uses_top_passages():
    embedder = TableEmbedder({"query": [1, 0], "close": [1, 0], "away": [0, 1], "": [1, 0]})
    corpus = {"d1": "close", "d2": "away"}
    scored = ScoredList.from_scores("t", "x", {"d1": 2.0, "d2": 1.0})
    assert deps_weight("query", scored, corpus, embedder, top_k=1) == 0.5
    assert deps_weight("query", scored, corpus, embedder, top_k=2) > 0.5
    assert deps_weight("query", ScoredList("t", "x"), corpus, embedder) == 0.5


def test_estimator_to_vector():
    assert estimator_to_vector(0.4).as_list() == pytest.approx([0.3, 0.3, 0.4])
    assert estimator_to_vector(0.0).as_list() == [0.5, 0.5, 0.0]
    with pytest.raises(ValueError):
        estimator_to_vector(1.2)


def test_estimate_turn_weights_entropy_flags():
    sessions = [session(["I run marathons."], session_id="s1"), session(["I am vegan.", "I live in Oslo."], session_id="s2")]
    bundles = [bundle("s1_1"), bundle("s2_1")]
    estimates = estimate_turn_weights("entropy", bundles, sessions)
    assert estimates["s1_1"].w3 == 0.0
    assert set(estimates["s1_1"].flags) == {"degenerate_profile", "short_profile"}
    assert estimates["s2_1"].flags == []
    assert sum(estimates["s2_1"].weights) == pytest.approx(1.0)


def test_estimate_turn_weights_random_is_per_turn_and_seeded():
    bundles = [bundle("s1_1"), bundle("s1_2")]
    first = estimate_turn_weights("random", bundles, [], seed=3)
    again = estimate_turn_weights("random", bundles, [], seed=3)
    assert first["s1_1"].weights == again["s1_1"].weights
    assert first["s1_1"].weights != first["s1_2"].weights


def test_estimate_turn_weights_none_and_equal():
    bundles = [bundle("s1_1")]
    assert estimate_turn_weights("none", bundles, []).get("s1_1").weights.as_list() == [0.5, 0.5, 0.0]
    assert estimate_turn_weights("equal", bundles, [])["s1_1"].weights.as_list() == pytest.approx([1 / 3] * 3)


def test_estimate_turn_weights_deps_empty_list_flag():
    empty = ScoredList("s1_1", "x")
    estimates = estimate_turn_weights("deps", [bundle("s1_1")], [], lists_by_topic={"s1_1": [empty, empty, empty]}, corpus={})
    assert estimates["s1_1"].w3 == 0.5
    assert estimates["s1_1"].flags == ["empty_list"]


def test_estimate_turn_weights_errors():
    with pytest.raises(ValueError):
        estimate_turn_weights("oracle", [], [])
    with pytest.raises(ValueError):
        estimate_turn_weights("deps", [bundle("s1_1")], [])


def test_apply_and_dump_turn_weights():
    lists = [
        ScoredList.from_scores("s1_1", "v0", {"a": 1.0, "b": 0.0}),
        ScoredList.from_scores("s1_1", "v1", {"b": 1.0}),
        ScoredList.from_scores("s1_1", "v2", {"c": 1.0}),
    ]
    estimates = estimate_turn_weights("none", [bundle("s1_1")], [])
    final = apply_turn_weights(estimates, {"s1_1": lists})
    assert final["s1_1"].passage_ids() == ["a", "b"]
    assert b'"method": "none"' in dump_turn_weights("none", estimates)
    with pytest.raises(ValueError):
        apply_turn_weights(estimates, {})
