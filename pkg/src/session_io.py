# Session, corpus, qrels and TREC run-file I/O
from __future__ import annotations

import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from src.errors import ConflictError, ParseError, SchemaError


def make_topic_id(session_id, turn_id):
    """Per-turn topic id used in qrels and run files: ``<session_id>_<turn_id>``."""
    return f"{session_id}_{turn_id}"


class Turn(BaseModel):
    """One user utterance (q_n) with the system response (r_n), if any."""

    model_config = ConfigDict(frozen=True)

    turn_id: int
    utterance: str
    response: str | None = None
    gold_level: Literal["a", "b", "c"] | None = None

    @field_validator("turn_id")
    @classmethod
    def _positive_turn_id(cls, value):
        if value < 1:
            raise ValueError("turn_id must be a positive integer")
        return value

    @field_validator("utterance")
    @classmethod
    def _non_empty_utterance(cls, value):
        if not value.strip():
            raise ValueError("utterance must be non-empty")
        return value


class ConversationSession(BaseModel):
    """A user profile plus the ordered turns of one conversation."""

    model_config = ConfigDict(frozen=True)

    session_id: str
    user_profile: tuple[str, ...] = ()
    turns: tuple[Turn, ...]

    @field_validator("session_id")
    @classmethod
    def _non_empty_session_id(cls, value):
        if not value.strip():
            raise ValueError("session_id must be non-empty")
        return value

    @model_validator(mode="after")
    def _increasing_turn_ids(self):
        previous = 0
        for turn in self.turns:
            if turn.turn_id <= previous:
                raise ValueError(f"non-increasing turn id {turn.turn_id} after {previous}")
            previous = turn.turn_id
        return self

    def topic_id(self, turn_index):
        return make_topic_id(self.session_id, self.turns[turn_index].turn_id)

    def history(self, turn_index):
        """Turns strictly before ``turn_index`` (H_n)."""
        return self.turns[:turn_index]


class _SessionFile(BaseModel):
    sessions: list[ConversationSession]


def _schema_error(error: ValidationError):
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    if first["type"] == "missing":
        return SchemaError(f"missing required field '{location}'", field=location)
    return SchemaError(f"{location}: {first['msg']}", field=location)


def decode_utf8(data):
    if not isinstance(data, bytes):
        return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        line = data.count(b"\n", 0, e.start) + 1
        position = e.start - (data.rfind(b"\n", 0, e.start) + 1) + 1
        raise ParseError(f"invalid UTF-8 at byte {e.start}", line=line, position=position) from e


def _load_json(data):
    data = decode_utf8(data)
    try:
        return json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno, position=e.colno) from e


def parse_sessions(data):
    """
    Parse the session JSON document into ConversationSession objects.

    Args:
        data (bytes | str): UTF-8 text of ``{"sessions": [...]}``

    Returns:
        list[ConversationSession]: Sessions in input order

    Raises:
        ParseError: If the text is not valid JSON (with line and position)
        SchemaError: If a required field is missing or an invariant is violated
    """
    document = _load_json(data)
    try:
        return _SessionFile.model_validate(document).sessions
    except ValidationError as e:
        raise _schema_error(e) from None


def dump_sessions(sessions):
    payload = {"sessions": [session.model_dump(exclude_none=True) for session in sessions]}
    return (json.dumps(payload, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def parse_corpus(data):
    """
    Parse a JSON-lines corpus of ``{"id": ..., "contents": ...}`` records.

    Returns:
        dict[str, str]: passage id -> text, in file order
    """
    data = decode_utf8(data)
    passages = {}
    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, line=lineno, position=e.colno) from e
        for key in ("id", "contents"):
            if key not in record:
                raise SchemaError(f"line {lineno}: missing required field '{key}'", field=key)
        passage_id = str(record["id"])
        if not passage_id:
            raise SchemaError(f"line {lineno}: empty passage id", field="id")
        if passage_id in passages:
            raise ConflictError(f"line {lineno}: duplicate passage id {passage_id!r}")
        passages[passage_id] = record["contents"]
    return passages


def dump_corpus(passages):
    lines = [json.dumps({"id": pid, "contents": text}, ensure_ascii=False) for pid, text in passages.items()]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


@dataclass
class Qrels:
    """Graded relevance judgments keyed by (topic id, passage id)."""

    judgments: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, topic_id, passage_id, grade):
        if grade < 0:
            raise ValueError(f"negative grade {grade} for ({topic_id}, {passage_id})")
        per_topic = self.judgments.setdefault(topic_id, {})
        if passage_id in per_topic:
            raise ConflictError(f"duplicate judgment for ({topic_id}, {passage_id})")
        per_topic[passage_id] = grade

    def for_topic(self, topic_id):
        return self.judgments.get(topic_id, {})

    def grade(self, topic_id, passage_id):
        return self.judgments.get(topic_id, {}).get(passage_id, 0)

    def topics(self):
        return sorted(self.judgments)

    def items(self) -> Iterator[tuple[tuple[str, str], int]]:
        for topic_id in self.topics():
            for passage_id, grade in self.judgments[topic_id].items():
                yield (topic_id, passage_id), grade

    def __contains__(self, key):
        topic_id, passage_id = key
        return passage_id in self.judgments.get(topic_id, {})

    def __len__(self):
        return sum(len(per_topic) for per_topic in self.judgments.values())


def parse_qrels(data):
    """
    Parse TREC qrels lines ``topic 0 passage grade``.

    Raises:
        ParseError: On a malformed line or a non-integer / negative grade
        ConflictError: On a repeated (topic, passage) key
    """
    data = decode_utf8(data)
    qrels = Qrels()
    for lineno, line in enumerate(data.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ParseError(f"expected 4 columns, found {len(parts)}", line=lineno)
        topic_id, _, passage_id, raw_grade = parts
        try:
            grade = int(raw_grade)
        except ValueError:
            raise ParseError(f"non-integer grade {raw_grade!r}", line=lineno) from None
        if grade < 0:
            raise ParseError(f"negative grade {grade}", line=lineno)
        if (topic_id, passage_id) in qrels:
            raise ConflictError(f"line {lineno}: duplicate judgment for ({topic_id}, {passage_id})")
        qrels.add(topic_id, passage_id, grade)
    return qrels


def write_qrels(qrels):
    lines = [f"{topic_id} 0 {passage_id} {grade}" for (topic_id, passage_id), grade in qrels.items()]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def _sort_key(entry):
    passage_id, score = entry
    return (-score, passage_id)


def check_entries(entries):
    """
    Shared ScoredList validator: scores descending, ties by ascending
    passage id, passage ids unique, scores finite.

    Raises:
        ValueError: On the first violation found
    """
    seen = set()
    previous = None
    for entry in entries:
        passage_id, score = entry
        if not math.isfinite(score):
            raise ValueError(f"non-finite score for {passage_id!r}")
        if passage_id in seen:
            raise ValueError(f"duplicate passage id {passage_id!r}")
        seen.add(passage_id)
        if previous is not None and _sort_key(previous) > _sort_key(entry):
            raise ValueError(f"entries out of order at {passage_id!r}")
        previous = entry


@dataclass(frozen=True)
class ScoredList:
    """One ranking list: (passage id, score) pairs in canonical order."""

    topic_id: str
    run_tag: str
    entries: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        check_entries(self.entries)

    @classmethod
    def from_scores(cls, topic_id, run_tag, scores: Mapping[str, float] | Iterable[tuple[str, float]]):
        """Build a list from unordered scores, applying the canonical sort."""
        pairs = scores.items() if isinstance(scores, Mapping) else scores
        entries = sorted(((str(pid), float(score) + 0.0) for pid, score in pairs), key=_sort_key)
        return cls(topic_id, run_tag, tuple(entries))

    def passage_ids(self):
        return [passage_id for passage_id, _ in self.entries]

    def scores(self):
        return [score for _, score in self.entries]

    def as_dict(self):
        return dict(self.entries)

    def truncated(self, depth):
        return ScoredList(self.topic_id, self.run_tag, self.entries[:depth])

    def with_tag(self, run_tag):
        return ScoredList(self.topic_id, run_tag, self.entries)

    def __len__(self):
        return len(self.entries)


def parse_run(data):
    """
    Parse a TREC 6-column run file into one ScoredList per topic.

    The rank column is ignored; entries are re-sorted by score with ties
    broken by passage id.

    Returns:
        dict[str, ScoredList]: topic id -> list
    """
    data = decode_utf8(data)
    scores: dict[str, dict[str, float]] = {}
    tags: dict[str, str] = {}
    for lineno, line in enumerate(data.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ParseError(f"expected 6 columns, found {len(parts)}", line=lineno)
        topic_id, _, passage_id, _, raw_score, tag = parts
        try:
            score = float(raw_score)
        except ValueError:
            raise ParseError(f"non-numeric score {raw_score!r}", line=lineno) from None
        per_topic = scores.setdefault(topic_id, {})
        if passage_id in per_topic:
            raise ConflictError(f"line {lineno}: duplicate entry for ({topic_id}, {passage_id})")
        per_topic[passage_id] = score
        tags.setdefault(topic_id, tag)
    return {topic_id: ScoredList.from_scores(topic_id, tags[topic_id], per_topic) for topic_id, per_topic in scores.items()}


def write_run(run, tag):
    """
    Serialize a run: topics ascending, 1-based rank, 6-decimal scores.

    Args:
        run (Mapping[str, ScoredList]): topic id -> list
        tag (str): run tag written in the last column

    Returns:
        bytes: TREC run text
    """
    lines = []
    for topic_id in sorted(run):
        for rank, (passage_id, score) in enumerate(run[topic_id].entries, start=1):
            lines.append(f"{topic_id} Q0 {passage_id} {rank} {score + 0.0:.6f} {tag}\n")
    return "".join(lines).encode("utf-8")
