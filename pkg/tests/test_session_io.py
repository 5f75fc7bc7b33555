import json
import random

import pytest

from src.errors import ConflictError, ParseError, SchemaError
from src.session_io import (
    Qrels,
    ScoredList,
    check_entries,
    dump_sessions,
    make_topic_id,
    parse_corpus,
    parse_qrels,
    parse_run,
    parse_sessions,
    write_qrels,
    write_run,
)


def _session_doc(**overrides):
    session = {
        "session_id": "9-1",
        "user_profile": [],
        "turns": [{"turn_id": 1, "utterance": "Can you help me find a diet?"}],
    }
    session.update(overrides)
    return json.dumps({"sessions": [session]}).encode("utf-8")


def test_parse_minimal_session():
    sessions = parse_sessions(_session_doc())
    assert len(sessions) == 1
    assert sessions[0].user_profile == ()
    assert len(sessions[0].turns) == 1
    assert sessions[0].turns[0].response is None


def test_parse_session_keeps_profile_and_turn_order():
    profile = [f"Sentence {k}." for k in range(10)]
    turns = [{"turn_id": i, "utterance": f"q{i}", "response": f"r{i}"} for i in (1, 2, 3)]
    session = parse_sessions(_session_doc(user_profile=profile, turns=turns))[0]
    assert len(session.user_profile) == 10
    assert list(session.user_profile) == profile
    assert [t.utterance for t in session.turns] == ["q1", "q2", "q3"]
    assert session.history(2) == session.turns[:2]
    assert session.topic_id(2) == "9-1_3"


def test_parse_session_duplicate_turn_id():
    turns = [{"turn_id": 1, "utterance": "a"}, {"turn_id": 2, "utterance": "b"}, {"turn_id": 2, "utterance": "c"}]
    with pytest.raises(SchemaError, match="non-increasing turn id"):
        parse_sessions(_session_doc(turns=turns))


def test_parse_session_missing_field_names_it():
    doc = json.dumps({"sessions": [{"session_id": "s", "turns": [{"turn_id": 1}]}]})
    with pytest.raises(SchemaError, match="utterance") as excinfo:
        parse_sessions(doc)
    assert "utterance" in excinfo.value.field


def test_parse_session_malformed_json_reports_line():
    with pytest.raises(ParseError) as excinfo:
        parse_sessions(b'{"sessions": [\n  {"session_id": }\n]}')
    assert excinfo.value.line == 2
    assert "line 2" in str(excinfo.value)


def test_parse_session_rejects_empty_utterance():
    with pytest.raises(SchemaError):
        parse_sessions(_session_doc(turns=[{"turn_id": 1, "utterance": "  "}]))


def test_dump_sessions_round_trip():
    sessions = parse_sessions(_session_doc(user_profile=["I am vegan."]))
    assert parse_sessions(dump_sessions(sessions)) == sessions


def test_make_topic_id():
    assert make_topic_id("9-1", 4) == "9-1_4"


def test_parse_qrels_single_line():
    qrels = parse_qrels(b"9-1_1 0 docA 2\n")
    assert qrels.for_topic("9-1_1") == {"docA": 2}
    assert qrels.grade("9-1_1", "docB") == 0


def test_parse_qrels_empty():
    qrels = parse_qrels(b"")
    assert len(qrels) == 0
    assert qrels.topics() == []


def test_parse_qrels_non_integer_grade():
    with pytest.raises(ParseError) as excinfo:
        parse_qrels(b"t 0 d x\n")
    assert excinfo.value.line == 1


def test_parse_qrels_duplicate_key():
    with pytest.raises(ConflictError):
        parse_qrels(b"t 0 d 1\nt 0 d 2\n")


def test_qrels_write_parse_round_trip():
    qrels = Qrels()
    qrels.add("t2", "b", 0)
    qrels.add("t1", "a", 3)
    assert parse_qrels(write_qrels(qrels)).judgments == qrels.judgments


def test_parse_corpus():
    data = b'{"id": "d1", "contents": "a b"}\n\n{"id": "d2", "contents": "b c"}\n'
    assert parse_corpus(data) == {"d1": "a b", "d2": "b c"}


def test_parse_corpus_errors():
    with pytest.raises(ConflictError):
        parse_corpus(b'{"id": "d1", "contents": "x"}\n{"id": "d1", "contents": "y"}\n')
    with pytest.raises(SchemaError, match="contents"):
        parse_corpus(b'{"id": "d1"}\n')
    with pytest.raises(ParseError) as excinfo:
        parse_corpus(b'{"id": "d1", "contents": "x"}\n{oops\n')
    assert excinfo.value.line == 2


def test_invalid_utf8_is_a_parse_error_with_offset():
    with pytest.raises(ParseError, match="byte 16") as excinfo:
        parse_qrels(b"t1 0 d1 1\nt1 0 d\xff 2\n")
    assert (excinfo.value.line, excinfo.value.position) == (2, 7)
    with pytest.raises(ParseError):
        parse_sessions(b"\xfe{}")
    with pytest.raises(ParseError):
        parse_corpus(b'{"id": "d1", "contents": "caf\xe9"}\n')
    with pytest.raises(ParseError):
        parse_run(b"t1 Q0 d1 1 1.0 run\xc3\n")


def test_parse_run_sorts_by_score():
    run = parse_run(b"t Q0 low 1 5.0 tag\nt Q0 high 2 7.0 tag\n")
    assert run["t"].entries == (("high", 7.0), ("low", 5.0))


def test_parse_run_breaks_ties_by_passage_id():
    run = parse_run(b"t Q0 docB 1 3.0 tag\nt Q0 docA 2 3.0 tag\n")
    assert run["t"].passage_ids() == ["docA", "docB"]


def test_parse_run_duplicate_entry():
    with pytest.raises(ConflictError):
        parse_run(b"t Q0 d 1 3.0 tag\nt Q0 d 2 2.0 tag\n")


def test_write_run_format():
    run = {
        "t2": ScoredList("t2", "x", (("b", 1.0),)),
        "t1": ScoredList("t1", "x", (("a", 2.5), ("c", 0.1234567))),
    }
    assert write_run(run, "tag") == (
        b"t1 Q0 a 1 2.500000 tag\n"
        b"t1 Q0 c 2 0.123457 tag\n"
        b"t2 Q0 b 1 1.000000 tag\n"
    )


def test_write_run_parse_run_fixpoint_on_random_runs():
    rng = random.Random(7)
    for _ in range(20):
        lines = []
        for t in range(rng.randint(1, 5)):
            for p in rng.sample(range(400), rng.randint(1, 200)):
                lines.append(f"t{t} Q0 p{p:04d} 0 {rng.uniform(-5, 30):.6f} tag\n")
        data = "".join(lines).encode("utf-8")
        normalized = write_run(parse_run(data), "tag")
        assert write_run(parse_run(normalized), "tag") == normalized


def test_large_run_round_trips_byte_identically():
    rng = random.Random(3)
    entries = {f"p{i:04d}": round(rng.uniform(0, 20), 6) for i in range(1000)}
    generated = write_run({"t": ScoredList.from_scores("t", "tag", entries)}, "tag")
    assert len(generated.splitlines()) == 1000
    assert write_run(parse_run(generated), "tag") == generated


def test_scored_list_rejects_unsorted_entries():
    with pytest.raises(ValueError):
        ScoredList("t", "x", (("a", 1.0), ("b", 2.0)))
    with pytest.raises(ValueError):
        ScoredList("t", "x", (("b", 1.0), ("a", 1.0)))
    with pytest.raises(ValueError):
        check_entries([("a", 2.0), ("a", 1.0)])
    with pytest.raises(ValueError):
        check_entries([("a", float("nan"))])


def test_scored_list_from_scores_canonical_order():
    scored = ScoredList.from_scores("t", "x", {"c": 1.0, "a": 2.0, "b": 1.0})
    assert scored.passage_ids() == ["a", "b", "c"]
    assert scored.truncated(2).passage_ids() == ["a", "b"]
