# Personalization level identification and query reformulation through a chat model
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Protocol

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from src.errors import BackendError, ParseError, SchemaError
from src.retrieval import truncate_tokens
from src.session_io import decode_utf8

logger = logging.getLogger(__name__)

N_VARIANTS = 3
VARIANT_NAMES = ("qprime", "qprime_r", "personalized")


class PersonalizationLevel(str, Enum):
    A = "a"  # non-personalization
    B = "b"  # partial personalization
    C = "c"  # full personalization

    @property
    def personalized(self):
        return self is not PersonalizationLevel.A


def join_texts(*parts):
    """Concatenate rewrite and pseudo-response texts with a single space."""
    return " ".join(part.strip() for part in parts if part and part.strip())


class ReformulationBundle(BaseModel):
    """
    Output of one level-identification + reformulation call for a turn.

    For levels b/c, ``q_user``/``r_user`` hold the personalized rewrite and
    pseudo response; for level a they hold a second non-personalized pair.
    """

    model_config = ConfigDict(frozen=True)

    topic_id: str
    level: PersonalizationLevel
    q_prime: str
    r_prime: str = ""
    q_user: str
    r_user: str = ""
    raw_reasoning: str = ""
    degraded: bool = False

    @field_validator("q_prime", "q_user")
    @classmethod
    def _non_empty_query(cls, value):
        if not value.strip():
            raise ValueError("query variants must be non-empty")
        return value

    def retrieval_texts(self, query_max_tokens=64, response_max_tokens=256):
        """
        The M=3 retrieval texts: [q'], [q' r'], [q^u r^u] (or [q'' r''] at level a).
        Rewrites are cut to ``query_max_tokens`` and responses to ``response_max_tokens``.
        """
        q_prime = truncate_tokens(self.q_prime, query_max_tokens)
        return [
            q_prime,
            join_texts(q_prime, truncate_tokens(self.r_prime, response_max_tokens)),
            join_texts(
                truncate_tokens(self.q_user, query_max_tokens),
                truncate_tokens(self.r_user, response_max_tokens),
            ),
        ]


def degraded_bundle(topic_id, utterance, reasoning=""):
    """Fallback when the model output cannot be parsed: level a, verbatim utterance."""
    return ReformulationBundle(
        topic_id=topic_id,
        level=PersonalizationLevel.A,
        q_prime=utterance,
        r_prime="",
        q_user=utterance,
        r_user="",
        raw_reasoning=reasoning,
        degraded=True,
    )


@dataclass(frozen=True)
class PromptTemplate:
    """Instruction, level examples, reformulation demonstrations, CoT directive and output format."""

    instruction: str
    level_examples: str
    reformulation_examples: str
    cot_directive: str
    output_format: str


DEFAULT_TEMPLATE = PromptTemplate(
    instruction=(
        "You will be given an information-seeking dialog between a user and an intelligent assistant, "
        "together with the user's profile. Your tasks are:\n"
        "(1) Decide how much the last question needs to be personalized with information from the profile "
        "to yield relevant web search results. Choose one level:\n"
        "  a. non-personalization: the question is self-contained and needs no personal information;\n"
        "  b. partial personalization: the question can retrieve general results on its own, and the profile "
        "is an extra benefit;\n"
        "  c. personalization: the profile holds important, indispensable information or constraints for an "
        "accurate answer.\n"
        "(2) Rewrite the user's last question so it fully expresses the information need without referring to "
        "the dialog context or the profile. Write this rewrite WITHOUT any profile information.\n"
        "(3) If you chose level b or c, write a second rewrite that adds the profile elements useful for the "
        "search. If you chose level a, write a second, differently worded rewrite that still uses NO profile "
        "information.\n"
        "(4) Give your reasoning for the level and the rewrites.\n"
        "(5) Give an informative response to each rewritten question."
    ),
    level_examples=(
        "Level a\n"
        "  Query: Can you explain the origins of Chinese white wine?\n"
        "  Profile: I do not drink alcohol.\n"
        "  Reason: The question is about the general history of wine; drinking preferences are irrelevant.\n"
        "Level b\n"
        "  Query: What are good places to visit in the city?\n"
        "  Profile: I love modern art.\n"
        "  Reason: General sightseeing results are useful; the art interest can improve them.\n"
        "Level c\n"
        "  Query: Which diet plan should I follow?\n"
        "  Profile: I am allergic to nuts and I am vegan.\n"
        "  Reason: The allergy and the vegan diet are hard constraints on any valid answer."
    ),
    reformulation_examples=(
        "Dialog: Q1: I want to start running. A1: Start with short easy runs.\n"
        "Question: Which shoes should I buy?\n"
        "Profile: I have flat feet.\n"
        "Level: c\n"
        "Rewrite: Which running shoes should a beginner runner buy?\n"
        "Personalized rewrite: Which running shoes should a beginner runner with flat feet buy?"
    ),
    cot_directive=(
        "Think step by step: first decide the level and explain why, then write the rewrites and responses."
    ),
    output_format=(
        "Answer with one fenced JSON object and nothing else:\n"
        "```json\n"
        '{"level": "a|b|c", "reasoning": "...", "rewrite": "...", "response": "...", '
        '"personalized_rewrite": "... (levels b/c)", "personalized_response": "... (levels b/c)", '
        '"alternative_rewrite": "... (level a)", "alternative_response": "... (level a)"}\n'
        "```"
    ),
)

# ablations drop one component of the full prompt
PROMPT_TEMPLATES = {
    "full": DEFAULT_TEMPLATE,
    "no_cot": replace(DEFAULT_TEMPLATE, cot_directive=""),
    "no_level_examples": replace(DEFAULT_TEMPLATE, level_examples=""),
}


def get_template(name):
    """Prompt template by name (full, no_cot or no_level_examples)."""
    if name not in PROMPT_TEMPLATES:
        raise ValueError(f"Unknown prompt template {name!r}; expected one of {sorted(PROMPT_TEMPLATES)}")
    return PROMPT_TEMPLATES[name]


def render_prompt(template, session, turn_index):
    """
    Render the prompt for one turn: instruction, level examples, rewrite
    demonstrations, profile, dialog history before the turn, current
    question, CoT directive and output format. Template sections left empty
    are omitted.

    Raises:
        ValueError: If turn_index is out of range
    """
    if not 0 <= turn_index < len(session.turns):
        raise ValueError(f"turn_index {turn_index} out of range for session {session.session_id} ({len(session.turns)} turns)")

    profile = "\n".join(f"{k}. {sentence}" for k, sentence in enumerate(session.user_profile, start=1))
    context = []
    for i, turn in enumerate(session.history(turn_index), start=1):
        context.append(f"Q{i}: {turn.utterance}")
        if turn.response:
            context.append(f"A{i}: {turn.response}")
    # (title, body, kept even when empty)
    sections = [
        ("Task Description", template.instruction, False),
        ("Sample Cases for Deciding Personalization Level", template.level_examples, False),
        ("Sample Cases for Rewriting", template.reformulation_examples, False),
        ("User Profile", profile, True),
        ("Dialog Context", "\n".join(context), True),
        ("Current Question", session.turns[turn_index].utterance, True),
        ("Reasoning", template.cot_directive, False),
        ("Output Format", template.output_format, False),
    ]
    return "\n\n".join(f"# {title}\n{body}" for title, body, always in sections if body or always) + "\n"


class _ModelOutput(BaseModel):
    level: PersonalizationLevel
    reasoning: str = ""
    rewrite: str
    response: str = ""
    personalized_rewrite: str | None = None
    personalized_response: str | None = None
    alternative_rewrite: str | None = None
    alternative_response: str | None = None


_FENCE_RE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)


def parse_model_output(text, topic_id):
    """
    Parse the fenced JSON answer of the model into a bundle.

    Raises:
        ParseError: If no JSON object can be decoded
        SchemaError: If required fields are missing or empty
    """
    match = _FENCE_RE.search(text)
    raw = match.group(1) if match else text[text.find("{"): text.rfind("}") + 1]
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ParseError(f"model output is not JSON: {e.msg}", line=e.lineno, position=e.colno) from e
    try:
        output = _ModelOutput.model_validate(payload)
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaError(f"model output: {first['loc']}: {first['msg']}", field=str(first["loc"])) from None

    if output.level.personalized:
        q_user, r_user = output.personalized_rewrite, output.personalized_response
        if not q_user or not q_user.strip():
            raise SchemaError("model output: personalized_rewrite is required for levels b/c", field="personalized_rewrite")
    else:
        q_user = output.alternative_rewrite or output.rewrite
        r_user = output.alternative_response if output.alternative_response is not None else output.response
    try:
        return ReformulationBundle(
            topic_id=topic_id,
            level=output.level,
            q_prime=output.rewrite,
            r_prime=output.response,
            q_user=q_user,
            r_user=r_user or "",
            raw_reasoning=output.reasoning,
        )
    except ValidationError as e:
        raise SchemaError(f"model output: {e.errors()[0]['msg']}", field="rewrite") from None


def format_model_output(level, rewrite, response="", reasoning="", personalized_rewrite=None,
                        personalized_response=None, alternative_rewrite=None, alternative_response=None):
    """Render an answer in the output contract (used by the mock fixtures and the echo backend)."""
    payload = {"level": PersonalizationLevel(level).value, "reasoning": reasoning, "rewrite": rewrite, "response": response}
    optional = {
        "personalized_rewrite": personalized_rewrite,
        "personalized_response": personalized_response,
        "alternative_rewrite": alternative_rewrite,
        "alternative_response": alternative_response,
    }
    payload.update({key: value for key, value in optional.items() if value is not None})
    return "```json\n" + json.dumps(payload, ensure_ascii=False, sort_keys=True) + "\n```"


def prompt_hash(prompt):
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ChatClient(Protocol):
    model_id: str

    def complete(self, prompt: str) -> str: ...


class HttpChatClient:
    """OpenAI-compatible chat-completions backend."""

    def __init__(self, base_url, api_key, model="gpt-4o", temperature=0.0):
        from openai import OpenAI

        self.model_id = model
        self.temperature = temperature
        self.client = OpenAI(base_url=base_url, api_key=api_key)

    @classmethod
    def from_env(cls, model="gpt-4o", temperature=0.0):
        """Build a client from ``APCIR_LLM_URL`` and ``APCIR_LLM_KEY``."""
        api_key = os.getenv("APCIR_LLM_KEY")
        if not api_key:
            raise BackendError("APCIR_LLM_KEY is not set")
        return cls(os.getenv("APCIR_LLM_URL") or None, api_key, model=model, temperature=temperature)

    def complete(self, prompt):
        try:
            response = self.client.chat.completions.create(
                model=self.model_id,
                messages=[{"role": "user", "content": prompt}],
                temperature=self.temperature,
            )
        except Exception as e:
            raise BackendError(f"chat completion failed: {e}") from e
        return response.choices[0].message.content or ""


_SECTION_RE = re.compile(r"^# (.+)$", re.MULTILINE)


def _prompt_sections(prompt):
    titles = list(_SECTION_RE.finditer(prompt))
    sections = {}
    for i, match in enumerate(titles):
        end = titles[i + 1].start() if i + 1 < len(titles) else len(prompt)
        sections[match.group(1)] = prompt[match.end():end].strip("\n")
    return sections


def echo_response(prompt):
    """
    Deterministic stand-in answer: level a, rewrite = history utterances
    followed by the current question, empty pseudo responses. Never uses the profile.
    """
    sections = _prompt_sections(prompt)
    history = [line.split(": ", 1)[1] for line in sections.get("Dialog Context", "").splitlines() if re.match(r"^Q\d+: ", line)]
    rewrite = join_texts(*history, sections.get("Current Question", "").strip())
    return format_model_output("a", rewrite, reasoning="echo", alternative_rewrite=rewrite, alternative_response="")


class MockChatClient:
    """Returns canned answers keyed by prompt hash; optionally echoes on a miss."""

    def __init__(self, fixtures, echo_default=False, model_id="mock"):
        self.fixtures = dict(fixtures)
        self.echo_default = echo_default
        self.model_id = model_id
        self.calls = 0

    def complete(self, prompt):
        self.calls += 1
        key = prompt_hash(prompt)
        if key in self.fixtures:
            return self.fixtures[key]
        if self.echo_default:
            return echo_response(prompt)
        raise BackendError(f"no canned response for prompt hash {key[:12]}")


def mock_client(fixtures, echo_default=False):
    return MockChatClient(fixtures, echo_default=echo_default)


def echo_client():
    return MockChatClient({}, echo_default=True, model_id="echo")


def load_fixtures(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Fixture file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


class ResponseCache:
    """
    Content-addressed response store: key = sha256 of (model id, prompt).

    Responses live in memory and, when ``directory`` is given, as one JSON
    file per key. Inserts are insert-if-absent; ``lock_for`` serializes
    callers racing on the same key.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, str] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @staticmethod
    def key(model_id, prompt):
        return hashlib.sha256(json.dumps([model_id, prompt], ensure_ascii=False).encode("utf-8")).hexdigest()

    def lock_for(self, key):
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def _path(self, key):
        return self.directory / f"{key}.json"

    def get(self, key):
        if key in self._memory:
            return self._memory[key]
        if self.directory and self._path(key).exists():
            record = json.loads(self._path(key).read_text(encoding="utf-8"))
            self._memory[key] = record["response"]
            return record["response"]
        return None

    def put(self, key, model_id, response):
        with self._guard:
            self._memory.setdefault(key, response)
        if not self.directory or self._path(key).exists():
            return
        record = json.dumps({"model_id": model_id, "response": response}, ensure_ascii=False)
        fd, tmp_name = tempfile.mkstemp(dir=self.directory, prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(record)
        try:
            os.link(tmp_name, self._path(key))
        except FileExistsError:
            pass
        except OSError:
            os.replace(tmp_name, self._path(key))
        finally:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)


def identify_and_reformulate(client, template, session, turn_index, cache=None, max_retries=2):
    """
    Identify the personalization level of a turn and produce its rewrites with one model call.

    A cached response for (model id, prompt) is reused without calling the
    client. Unparseable output is retried with the same prompt up to
    ``max_retries`` times, then the turn degrades to level a with the
    verbatim utterance.

    Returns:
        ReformulationBundle: The parsed (or degraded) bundle
    """
    prompt = render_prompt(template, session, turn_index)
    topic_id = session.topic_id(turn_index)
    utterance = session.turns[turn_index].utterance
    cache = cache if cache is not None else ResponseCache()
    key = ResponseCache.key(client.model_id, prompt)

    with cache.lock_for(key):
        cached = cache.get(key)
        if cached is not None:
            logger.debug("cache hit %s for %s", key[:12], topic_id)
            try:
                return parse_model_output(cached, topic_id)
            except (ParseError, SchemaError):
                logger.warning("Cached response for %s does not parse; asking the backend again", topic_id)

        last_text = ""
        for attempt in range(max_retries + 1):
            last_text = client.complete(prompt)
            try:
                bundle = parse_model_output(last_text, topic_id)
            except (ParseError, SchemaError) as e:
                logger.warning("Unparseable output for %s (attempt %d/%d): %s", topic_id, attempt + 1, max_retries + 1, e)
                continue
            cache.put(key, client.model_id, last_text)
            return bundle

    logger.warning("Degrading %s to level a after %d attempts", topic_id, max_retries + 1)
    return degraded_bundle(topic_id, utterance, reasoning=last_text)


def reformulate_sessions(client, template, sessions, cache=None, max_in_flight=4, max_retries=2):
    """
    Reformulate every turn of every session, up to ``max_in_flight`` calls at a time.

    Returns:
        list[ReformulationBundle]: Bundles in session, then turn order
    """
    cache = cache if cache is not None else ResponseCache()
    jobs = [(session, i) for session in sessions for i in range(len(session.turns))]
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        return list(pool.map(lambda job: identify_and_reformulate(client, template, job[0], job[1], cache, max_retries), jobs))


def dump_bundles(bundles):
    """Serialize bundles as a JSON object keyed by topic id."""
    payload = {bundle.topic_id: bundle.model_dump(mode="json", exclude={"topic_id"}) for bundle in bundles}
    return (json.dumps(payload, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def parse_bundles(data):
    """
    Parse a bundles JSON document.

    Returns:
        list[ReformulationBundle]: Bundles in file order
    """
    data = decode_utf8(data)
    try:
        payload = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno, position=e.colno) from e
    bundles = []
    for topic_id, fields in payload.items():
        try:
            bundles.append(ReformulationBundle(topic_id=topic_id, **fields))
        except ValidationError as e:
            first = e.errors()[0]
            location = ".".join(str(p) for p in first["loc"])
            raise SchemaError(f"{topic_id}.{location}: {first['msg']}", field=location) from None
    return bundles


def load_bundles(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Bundles file not found: {path}")
    return parse_bundles(path.read_bytes())


def level_statistics(bundles, sessions=()):
    """
    Summarize identified levels, and compare them with gold labels when sessions carry them.

    Binary agreement counts levels b and c both as personalized; exact
    accuracy needs the same label.

    Returns:
        dict: counts per level, degraded count and, if any gold label exists,
        ``gold_turns``, ``binary_agreement`` and ``exact_accuracy``
    """
    gold = {}
    for session in sessions:
        for i, turn in enumerate(session.turns):
            if turn.gold_level is not None:
                gold[session.topic_id(i)] = PersonalizationLevel(turn.gold_level)

    counts = {level.value: 0 for level in PersonalizationLevel}
    degraded = 0
    binary = exact = judged = 0
    for bundle in bundles:
        level = PersonalizationLevel(bundle.level)
        counts[level.value] += 1
        degraded += bundle.degraded
        expected = gold.get(bundle.topic_id)
        if expected is None:
            continue
        judged += 1
        binary += level.personalized == expected.personalized
        exact += level is expected

    stats = {"turns": sum(counts.values()), "levels": counts, "degraded": degraded}
    if judged:
        stats.update(gold_turns=judged, binary_agreement=binary / judged, exact_accuracy=exact / judged)
    return stats
