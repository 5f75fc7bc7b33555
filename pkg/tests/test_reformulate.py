import json

import pytest

from src.errors import BackendError, ParseError, SchemaError
from src.reformulate import (
    DEFAULT_TEMPLATE,
    MockChatClient,
    PersonalizationLevel,
    ReformulationBundle,
    ResponseCache,
    HttpChatClient,
    dump_bundles,
    echo_client,
    format_model_output,
    get_template,
    identify_and_reformulate,
    level_statistics,
    load_bundles,
    load_fixtures,
    mock_client,
    parse_bundles,
    parse_model_output,
    prompt_hash,
    reformulate_sessions,
    render_prompt,
)
from src.session_io import ConversationSession, Turn


@pytest.fixture
def session():
    return ConversationSession(
        session_id="7-2",
        user_profile=("I am allergic to nuts.", "I live in Lyon."),
        turns=(
            Turn(turn_id=1, utterance="I want to bake a cake.", response="Try a sponge cake.", gold_level="a"),
            Turn(turn_id=2, utterance="Which flour should I use?", gold_level="c"),
        ),
    )


class ScriptedClient:
    """Answers with a fixed sequence of texts and counts calls."""

    model_id = "scripted"

    def __init__(self, answers):
        self.answers = list(answers)
        self.calls = 0

    def complete(self, prompt):
        self.calls += 1
        return self.answers[min(self.calls, len(self.answers)) - 1]


def test_render_prompt_sections_in_order(session):
    prompt = render_prompt(DEFAULT_TEMPLATE, session, 1)
    titles = [line[2:] for line in prompt.splitlines() if line.startswith("# ")]
    assert titles == [
        "Task Description",
        "Sample Cases for Deciding Personalization Level",
        "Sample Cases for Rewriting",
        "User Profile",
        "Dialog Context",
        "Current Question",
        "Reasoning",
        "Output Format",
    ]
    assert "1. I am allergic to nuts.\n2. I live in Lyon." in prompt
    assert "Q1: I want to bake a cake.\nA1: Try a sponge cake." in prompt
    assert "# Current Question\nWhich flour should I use?" in prompt


def test_render_prompt_first_turn_has_empty_context(session):
    prompt = render_prompt(DEFAULT_TEMPLATE, session, 0)
    assert "# Dialog Context\n\n\n# Current Question" in prompt


@pytest.mark.parametrize("name, missing", [
    ("no_cot", "Reasoning"),
    ("no_level_examples", "Sample Cases for Deciding Personalization Level"),
])
def test_ablated_templates_drop_one_section(session, name, missing):
    prompt = render_prompt(get_template(name), session, 0)
    titles = [line[2:] for line in prompt.splitlines() if line.startswith("# ")]
    assert missing not in titles
    assert len(titles) == 7
    assert "# Dialog Context\n\n\n# Current Question" in prompt
    assert prompt_hash(prompt) != prompt_hash(render_prompt(get_template("full"), session, 0))


def test_unknown_template_name():
    with pytest.raises(ValueError, match="no_cot"):
        get_template("terse")


def test_render_prompt_out_of_range(session):
    with pytest.raises(ValueError):
        render_prompt(DEFAULT_TEMPLATE, session, 2)


def test_render_prompt_is_deterministic(session):
    assert prompt_hash(render_prompt(DEFAULT_TEMPLATE, session, 1)) == prompt_hash(render_prompt(DEFAULT_TEMPLATE, session, 1))


def test_parse_model_output_personalized():
    text = "Sure!\n" + format_model_output(
        "c", "Which flour for a cake?", "Wheat flour.", reasoning="allergy",
        personalized_rewrite="Which nut-free flour for a cake?", personalized_response="Rice flour.",
    )
    bundle = parse_model_output(text, "7-2_2")
    assert bundle.level is PersonalizationLevel.C
    assert bundle.q_prime == "Which flour for a cake?"
    assert bundle.q_user == "Which nut-free flour for a cake?"
    assert bundle.r_user == "Rice flour."
    assert bundle.raw_reasoning == "allergy"
    assert not bundle.degraded


def test_parse_model_output_level_a_uses_alternative_rewrite():
    text = format_model_output("a", "History of white wine", "It is old.", alternative_rewrite="Origins of baijiu")
    bundle = parse_model_output(text, "t")
    assert bundle.q_user == "Origins of baijiu"
    assert bundle.r_user == "It is old."


def test_parse_model_output_unfenced_json():
    bundle = parse_model_output('Answer: {"level": "a", "rewrite": "q"} done', "t")
    assert bundle.q_prime == bundle.q_user == "q"


def test_parse_model_output_errors():
    with pytest.raises(ParseError):
        parse_model_output("no json here", "t")
    with pytest.raises(SchemaError):
        parse_model_output('{"level": "d", "rewrite": "q"}', "t")
    with pytest.raises(SchemaError):
        parse_model_output('{"level": "b", "rewrite": "q"}', "t")
    with pytest.raises(SchemaError):
        parse_model_output('{"level": "a", "rewrite": "  "}', "t")


def test_retrieval_texts_truncate_and_join():
    bundle = ReformulationBundle(topic_id="t", level="b", q_prime="one two three", r_prime="four five",
                                 q_user="six", r_user="seven eight")
    assert bundle.retrieval_texts() == ["one two three", "one two three four five", "six seven eight"]
    assert bundle.retrieval_texts(query_max_tokens=2, response_max_tokens=1) == ["one two", "one two four", "six seven"]


def test_identify_and_reformulate_with_mock_fixture(session):
    prompt = render_prompt(DEFAULT_TEMPLATE, session, 1)
    answer = format_model_output("c", "Which flour?", personalized_rewrite="Which nut-free flour?")
    client = mock_client({prompt_hash(prompt): answer})
    bundle = identify_and_reformulate(client, DEFAULT_TEMPLATE, session, 1)
    assert bundle.topic_id == "7-2_2"
    assert bundle.level == "c"


def test_mock_client_miss_raises(session):
    client = mock_client({})
    with pytest.raises(BackendError):
        identify_and_reformulate(client, DEFAULT_TEMPLATE, session, 0)


def test_echo_client_concatenates_history(session):
    bundle = identify_and_reformulate(echo_client(), DEFAULT_TEMPLATE, session, 1)
    assert bundle.level == "a"
    assert bundle.q_prime == "I want to bake a cake. Which flour should I use?"
    assert "nuts" not in bundle.q_user


def test_unparseable_output_is_retried_then_degraded(session):
    client = ScriptedClient(["garbage"])
    bundle = identify_and_reformulate(client, DEFAULT_TEMPLATE, session, 1, max_retries=2)
    assert client.calls == 3
    assert bundle.degraded
    assert bundle.level == "a"
    assert bundle.q_prime == bundle.q_user == "Which flour should I use?"


def test_retry_recovers(session):
    client = ScriptedClient(["garbage", format_model_output("b", "q", personalized_rewrite="qu")])
    bundle = identify_and_reformulate(client, DEFAULT_TEMPLATE, session, 1, max_retries=2)
    assert client.calls == 2
    assert bundle.level == "b"


def test_cache_hit_skips_backend(session, tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    client = ScriptedClient([format_model_output("a", "q")])
    first = identify_and_reformulate(client, DEFAULT_TEMPLATE, session, 0, cache=cache)
    second = identify_and_reformulate(client, DEFAULT_TEMPLATE, session, 0, cache=ResponseCache(tmp_path / "cache"))
    assert client.calls == 1
    assert first == second
    assert len(list((tmp_path / "cache").glob("*.json"))) == 1


def test_cache_insert_if_absent(tmp_path):
    cache = ResponseCache(tmp_path)
    cache.put("k", "m", "first")
    cache.put("k", "m", "second")
    assert cache.get("k") == "first"
    assert json.loads((tmp_path / "k.json").read_text())["response"] == "first"
    assert ResponseCache.key("m1", "p") != ResponseCache.key("m2", "p")


def test_reformulate_sessions_keeps_order(session):
    other = ConversationSession(session_id="8-1", turns=(Turn(turn_id=1, utterance="Hello there"),))
    bundles = reformulate_sessions(echo_client(), DEFAULT_TEMPLATE, [session, other], max_in_flight=3)
    assert [b.topic_id for b in bundles] == ["7-2_1", "7-2_2", "8-1_1"]


def test_http_client_requires_key(monkeypatch):
    monkeypatch.delenv("APCIR_LLM_KEY", raising=False)
    with pytest.raises(BackendError):
        HttpChatClient.from_env()


def test_http_client_calls_chat_completions(monkeypatch, mocker):
    monkeypatch.setenv("APCIR_LLM_KEY", "test-key")
    monkeypatch.setenv("APCIR_LLM_URL", "http://localhost:9999/v1")
    openai_cls = mocker.patch("openai.OpenAI")
    completion = mocker.MagicMock()
    completion.choices[0].message.content = "hello"
    openai_cls.return_value.chat.completions.create.return_value = completion

    client = HttpChatClient.from_env(model="test-model")
    assert client.complete("prompt") == "hello"
    openai_cls.assert_called_once_with(base_url="http://localhost:9999/v1", api_key="test-key")
    kwargs = openai_cls.return_value.chat.completions.create.call_args.kwargs
    assert kwargs["model"] == "test-model"
    assert kwargs["temperature"] == 0.0


def test_http_client_wraps_failures(monkeypatch, mocker):
    monkeypatch.setenv("APCIR_LLM_KEY", "test-key")
    openai_cls = mocker.patch("openai.OpenAI")
    openai_cls.return_value.chat.completions.create.side_effect = RuntimeError("boom")
    with pytest.raises(BackendError, match="boom"):
        HttpChatClient.from_env().complete("prompt")


def test_bundles_round_trip(tmp_path):
    bundles = [
        ReformulationBundle(topic_id="s_1", level="a", q_prime="q", q_user="q2"),
        ReformulationBundle(topic_id="s_2", level="c", q_prime="q", r_prime="r", q_user="qu", r_user="ru", degraded=False),
    ]
    path = tmp_path / "bundles.json"
    path.write_bytes(dump_bundles(bundles))
    assert load_bundles(path) == bundles
    with pytest.raises(SchemaError):
        parse_bundles(b'{"s_1": {"level": "a"}}')
    with pytest.raises(FileNotFoundError):
        load_bundles(tmp_path / "missing.json")


def test_load_fixtures(tmp_path):
    path = tmp_path / "fixtures.json"
    path.write_text('{"abc": "answer"}')
    assert load_fixtures(path) == {"abc": "answer"}
    with pytest.raises(FileNotFoundError):
        load_fixtures(tmp_path / "none.json")


def test_level_statistics_against_gold(session):
    bundles = [
        ReformulationBundle(topic_id="7-2_1", level="a", q_prime="q", q_user="q"),
        ReformulationBundle(topic_id="7-2_2", level="b", q_prime="q", q_user="qu"),
    ]
    stats = level_statistics(bundles, [session])
    assert stats["levels"] == {"a": 1, "b": 1, "c": 0}
    assert stats["gold_turns"] == 2
    assert stats["binary_agreement"] == 1.0
    assert stats["exact_accuracy"] == 0.5
    assert "gold_turns" not in level_statistics(bundles)


def test_mock_client_counts_calls():
    client = MockChatClient({"x": "y"}, echo_default=True)
    client.complete("anything")
    assert client.calls == 1
