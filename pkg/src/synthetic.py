# Deterministic desk-scale test collection with canned chat-model answers
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from src.data_loader import write_atomic
from src.reformulate import DEFAULT_TEMPLATE, format_model_output, prompt_hash, render_prompt
from src.session_io import ConversationSession, Qrels, Turn, dump_corpus, dump_sessions, write_qrels

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
SYLLABLES = [c + v for c in CONSONANTS for v in VOWELS]
PASSAGE_LENGTH = 16
FILLER_VOCABULARY = 400
SPECIAL_PASSAGES_PER_TURN = 3


class _WordSource:
    """Unique pseudo-words of three consonant-vowel syllables; none is a query template word."""

    def __init__(self, rng):
        self.rng = rng
        self.used = set()

    def take(self, n=1):
        words = []
        while len(words) < n:
            word = "".join(SYLLABLES[i] for i in self.rng.integers(0, len(SYLLABLES), 3))
            if word not in self.used:
                self.used.add(word)
                words.append(word)
        return words


@dataclass
class SyntheticCollection:
    corpus: dict[str, str]
    sessions: list[ConversationSession]
    qrels: Qrels
    fixtures: dict[str, str] = field(default_factory=dict)

    def files(self):
        """File name -> bytes for the whole collection, including a ready-to-run config."""
        config = {
            "paths": {
                "corpus": "corpus.jsonl",
                "sessions": "sessions.json",
                "qrels": "qrels.txt",
                "work_dir": "runs",
            },
            "reformulation": {"backend": "mock", "fixtures": "fixtures.json"},
        }
        return {
            "corpus.jsonl": dump_corpus(self.corpus),
            "sessions.json": dump_sessions(self.sessions),
            "qrels.txt": write_qrels(self.qrels),
            "fixtures.json": (json.dumps(self.fixtures, indent=2, sort_keys=True) + "\n").encode("utf-8"),
            "config.yaml": yaml.safe_dump(config, sort_keys=True).encode("utf-8"),
        }

    def write(self, directory):
        directory = Path(directory)
        return [write_atomic(directory / name, data) for name, data in self.files().items()]


def _padded(rng, key_words, filler, repeat):
    words = [w for w in key_words for _ in range(repeat)]
    words += list(rng.choice(filler, size=max(0, PASSAGE_LENGTH - len(words))))
    rng.shuffle(words)
    return " ".join(words)


def _turn_material(rng, words, filler, level):
    """
    Rewrites, pseudo responses and the three judged passages of one turn.

    Level a: the rewrites match the relevant passages; the alternative
    rewrite drifts to a distractor. Level c: the plain rewrites only match a
    generic distractor; the profile words match the relevant passages.
    Level b: the plain rewrites find the grade-2 passage and the personalized
    rewrite only finds the grade-1 one, so no single list ranks both.
    """
    topic = words.take(3)
    answer = words.take(2)
    profile = words.take(2)
    drift = words.take(3)
    t1, t2, t3 = topic
    material = {
        "topic": topic,
        "profile": profile,
        "utterance": f"What about {t1} {t2}?",
        "rewrite": f"What is known about {t1} {t2} {t3}?",
        "response": f"{t1} is linked to {answer[0]} and {answer[1]}.",
    }
    if level == "a":
        key = topic + answer
        distractor = _padded(rng, drift, filler, 1)
        material.update(
            alternative_rewrite=f"Tell me about {drift[0]} {drift[1]}.",
            alternative_response=f"{drift[0]} relates to {drift[2]}.",
        )
    elif level == "b":
        distractor = _padded(rng, topic, filler, 1)
        material.update(
            personalized_rewrite=f"What suits someone into {profile[0]} and {profile[1]}?",
            personalized_response=f"{profile[0]} fans like it.",
            passages=[_padded(rng, topic, filler, 2), _padded(rng, profile, filler, 2), distractor],
        )
        return material
    else:
        key = profile + answer
        distractor = _padded(rng, topic, filler, 1)
        material.update(
            response=f"Usually {t1} goes with {t3}.",
            personalized_rewrite=f"Which option fits someone into {profile[0]} and {profile[1]}?",
            personalized_response=f"For {profile[0]} fans {answer[0]} matters.",
        )
    material["passages"] = [_padded(rng, key, filler, 2), _padded(rng, key, filler, 1), distractor]
    return material


def generate_synthetic(seed=13, n_sessions=6, n_passages=1000, turns_per_session=5):
    """
    Build a small collection with turns of all three personalization levels.

    The same seed always yields the same corpus, sessions, qrels and mock
    fixtures. Each turn has two relevant passages (grades 2 and 1) and one
    judged non-relevant distractor; the rest of the corpus is filler.

    Args:
        seed (int): Random seed
        n_sessions (int): Number of sessions
        n_passages (int): Corpus size
        turns_per_session (int): Turns per session

    Returns:
        SyntheticCollection: corpus, sessions, qrels and fixtures keyed by prompt hash

    Raises:
        ValueError: If the corpus is too small to hold the judged passages
    """
    if n_sessions < 1 or turns_per_session < 1:
        raise ValueError("Need at least one session with one turn")
    n_turns = n_sessions * turns_per_session
    if n_passages < SPECIAL_PASSAGES_PER_TURN * n_turns:
        raise ValueError(f"{n_passages} passages cannot hold {SPECIAL_PASSAGES_PER_TURN * n_turns} judged passages")

    rng = np.random.default_rng(seed)
    words = _WordSource(rng)
    filler = words.take(FILLER_VOCABULARY)
    levels = [("a", "b", "c")[i % 3] for i in range(n_turns)]
    levels = [levels[i] for i in rng.permutation(n_turns)]

    texts = []
    judged = []
    plans = []
    for s in range(n_sessions):
        session_id = f"s{s + 1}"
        turns = []
        materials = []
        profile = []
        for t in range(turns_per_session):
            level = levels[s * turns_per_session + t]
            material = _turn_material(rng, words, filler, level)
            materials.append(material)
            if level != "a":
                profile.append(f"I really care about {material['profile'][0]} and {material['profile'][1]}.")
            profile.append(f"My hobby is {words.take(1)[0]}.")
            turns.append(Turn(
                turn_id=t + 1,
                utterance=material["utterance"],
                response=f"Here is something on {material['topic'][0]}.",
                gold_level=level,
            ))
            topic_id = f"{session_id}_{t + 1}"
            for grade, text in zip((2, 1, 0), material["passages"]):
                judged.append((topic_id, len(texts), grade))
                texts.append(text)
        plans.append((ConversationSession(session_id=session_id, user_profile=tuple(profile), turns=tuple(turns)), materials))

    while len(texts) < n_passages:
        texts.append(" ".join(rng.choice(filler, size=int(rng.integers(12, 21)))))
    ids = [f"doc{i:05d}" for i in rng.permutation(n_passages)]
    corpus = {ids[i]: texts[i] for i in sorted(range(n_passages), key=lambda i: ids[i])}

    qrels = Qrels()
    for topic_id, ordinal, grade in judged:
        qrels.add(topic_id, ids[ordinal], grade)

    sessions = []
    fixtures = {}
    for session, materials in plans:
        sessions.append(session)
        for i, material in enumerate(materials):
            level = session.turns[i].gold_level
            answer = format_model_output(
                level,
                material["rewrite"],
                material["response"],
                reasoning=f"synthetic level {level}",
                personalized_rewrite=material.get("personalized_rewrite"),
                personalized_response=material.get("personalized_response"),
                alternative_rewrite=material.get("alternative_rewrite"),
                alternative_response=material.get("alternative_response"),
            )
            fixtures[prompt_hash(render_prompt(DEFAULT_TEMPLATE, session, i))] = answer
    return SyntheticCollection(corpus, sessions, qrels, fixtures)
