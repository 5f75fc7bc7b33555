# In-memory inverted index and BM25 retrieval
from __future__ import annotations

import io
import json
import logging
import math
import re
import zipfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from src.data_loader import write_atomic
from src.errors import ParseError
from src.session_io import ScoredList

logger = logging.getLogger(__name__)

INDEX_MAGIC = "APCIR-INDEX"
INDEX_VERSION = 2
INDEX_ARRAYS = ("meta", "passage_ids", "doc_lengths", "terms", "offsets", "ordinals", "tfs")

_TOKEN_RE = re.compile(r"[^\W_]+")

STOPWORDS = frozenset(
    """a about an and are as at be but by can could do does for from had has have how i if in
    into is it its me my of on or our she so that the their them then there these they this
    to was we were what when where which who why will with would you your""".split()
)


def tokenize(text, stopwords=None):
    """
    Lowercase ``text`` and split it on non-alphanumeric characters.

    Args:
        text (str): Raw text
        stopwords (Collection[str] | None): Tokens to drop, if any

    Returns:
        list[str]: Non-empty tokens in order
    """
    tokens = _TOKEN_RE.findall(text.lower())
    if stopwords:
        tokens = [t for t in tokens if t not in stopwords]
    return tokens


def truncate_tokens(text, max_tokens):
    """Cut ``text`` right after its ``max_tokens``-th token, keeping the original characters."""
    if max_tokens is None:
        return text
    if max_tokens <= 0:
        return ""
    for count, match in enumerate(_TOKEN_RE.finditer(text), start=1):
        if count == max_tokens:
            return text[: match.end()]
    return text


@dataclass
class InvertedIndex:
    """
    Term -> postings over passage ordinals.

    ``postings[term]`` holds two aligned int arrays: passage ordinals
    (ascending) and term frequencies. Ordinals index ``passage_ids``, which
    is sorted, so ordinal order is passage-id order.
    """

    passage_ids: list[str]
    postings: dict[str, tuple[np.ndarray, np.ndarray]]
    doc_lengths: np.ndarray
    avg_doc_length: float
    k1: float = 0.9
    b: float = 0.4
    stopwords: bool = False
    version: int = field(default=INDEX_VERSION)

    @property
    def n_docs(self):
        return len(self.passage_ids)

    def postings_for(self, term):
        """Postings of ``term`` as (ordinal, term frequency) pairs."""
        if term not in self.postings:
            return []
        ordinals, tfs = self.postings[term]
        return list(zip(ordinals.tolist(), tfs.tolist()))

    def idf(self, term):
        df = len(self.postings[term][0]) if term in self.postings else 0
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def build_index(corpus, k1=0.9, b=0.4, stopwords=False, passage_max_tokens=None):
    """
    Build an inverted index over a passage corpus.

    Args:
        corpus (Mapping[str, str]): passage id -> text
        k1 (float): BM25 term-frequency saturation
        b (float): BM25 length normalization
        stopwords (bool): Drop the built-in English stopword list
        passage_max_tokens (int | None): Truncate passages to this many tokens

    Returns:
        InvertedIndex: The built index

    Raises:
        ValueError: If the corpus is empty
    """
    if not corpus:
        raise ValueError("Cannot build an index over an empty corpus")

    stop = STOPWORDS if stopwords else None
    passage_ids = sorted(corpus)
    doc_lengths = np.zeros(len(passage_ids), dtype=np.int64)
    ordinal_lists: dict[str, list[int]] = {}
    tf_lists: dict[str, list[int]] = {}

    for ordinal, passage_id in enumerate(passage_ids):
        tokens = tokenize(truncate_tokens(corpus[passage_id], passage_max_tokens), stop)
        doc_lengths[ordinal] = len(tokens)
        for term, tf in Counter(tokens).items():
            ordinal_lists.setdefault(term, []).append(ordinal)
            tf_lists.setdefault(term, []).append(tf)

    postings = {
        term: (np.asarray(ordinal_lists[term], dtype=np.int64), np.asarray(tf_lists[term], dtype=np.int64))
        for term in sorted(ordinal_lists)
    }
    avg_doc_length = float(doc_lengths.mean())
    logger.info("Indexed %d passages, %d terms, avg length %.2f", len(passage_ids), len(postings), avg_doc_length)
    return InvertedIndex(passage_ids, postings, doc_lengths, avg_doc_length, k1=k1, b=b, stopwords=stopwords)


def bm25_search(index, query_text, top_k, topic_id="", run_tag="bm25", max_query_tokens=None):
    """
    Score passages for ``query_text`` with Okapi BM25 and return the top ``top_k``.

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)); repeated query terms count
    once per occurrence. Only passages matching at least one query term are
    returned. A query with no tokens yields an empty list.

    Raises:
        ValueError: If top_k < 1
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")

    stop = STOPWORDS if index.stopwords else None
    query_terms = Counter(tokenize(truncate_tokens(query_text, max_query_tokens), stop))
    if not query_terms:
        return ScoredList(topic_id, run_tag)

    scores = np.zeros(index.n_docs, dtype=np.float64)
    matched = np.zeros(index.n_docs, dtype=bool)
    # length normalisation with avgdl == 0 would divide by zero; all-empty docs never match anyway
    avg_dl = index.avg_doc_length or 1.0
    for term in sorted(query_terms):
        if term not in index.postings:
            continue
        ordinals, tfs = index.postings[term]
        tf = tfs.astype(np.float64)
        norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[ordinals] / avg_dl)
        scores[ordinals] += query_terms[term] * index.idf(term) * tf * (index.k1 + 1.0) / (tf + norm)
        matched[ordinals] = True

    candidates = np.flatnonzero(matched)
    if candidates.size == 0:
        return ScoredList(topic_id, run_tag)
    # candidates ascend in ordinal (= passage id) order, so a stable sort breaks ties by id
    order = np.argsort(-scores[candidates], kind="stable")[:top_k]
    entries = tuple((index.passage_ids[i], float(scores[i])) for i in candidates[order])
    return ScoredList(topic_id, run_tag, entries)


@runtime_checkable
class Retriever(Protocol):
    """Anything that turns query text into a ScoredList."""

    def search(self, query_text: str, top_k: int, topic_id: str = "", run_tag: str = "bm25") -> ScoredList: ...


class BM25Retriever:
    """Retriever backed by an immutable InvertedIndex; safe for concurrent readers."""

    def __init__(self, index, max_query_tokens=None):
        self.index = index
        self.max_query_tokens = max_query_tokens

    def search(self, query_text, top_k, topic_id="", run_tag="bm25"):
        return bm25_search(
            self.index, query_text, top_k, topic_id=topic_id, run_tag=run_tag, max_query_tokens=self.max_query_tokens
        )


def _encode_meta(meta):
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_index(index, path):
    """
    Write an index as a numpy ``.npz`` archive: a JSON header plus flat
    postings arrays (``offsets[i]:offsets[i + 1]`` slices term ``i``).
    """
    terms = list(index.postings)
    lengths = [len(index.postings[term][0]) for term in terms]
    offsets = np.zeros(len(terms) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(lengths)
    empty = np.zeros(0, dtype=np.int64)
    meta = {
        "magic": INDEX_MAGIC,
        "version": INDEX_VERSION,
        "k1": index.k1,
        "b": index.b,
        "stopwords": index.stopwords,
        "avg_doc_length": index.avg_doc_length,
    }
    buffer = io.BytesIO()
    np.savez(
        buffer,
        meta=_encode_meta(meta),
        passage_ids=np.asarray(index.passage_ids, dtype=str),
        doc_lengths=np.asarray(index.doc_lengths, dtype=np.int64),
        terms=np.asarray(terms, dtype=str),
        offsets=offsets,
        ordinals=np.concatenate([index.postings[t][0] for t in terms]) if terms else empty,
        tfs=np.concatenate([index.postings[t][1] for t in terms]) if terms else empty,
    )
    return write_atomic(path, buffer.getvalue())


def load_index(path):
    """
    Load an index written by ``save_index``. Object arrays are refused, so
    loading never unpickles.

    Raises:
        FileNotFoundError: If the file doesn't exist
        ParseError: If the file is not an index or the version is unsupported
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Index file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in INDEX_ARRAYS}
        meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
    except (OSError, EOFError, ValueError, KeyError, zipfile.BadZipFile) as e:
        raise ParseError(f"not an apcir index: {path} ({e})") from e
    if not isinstance(meta, dict) or meta.get("magic") != INDEX_MAGIC:
        raise ParseError(f"not an apcir index: {path}")
    if meta.get("version") != INDEX_VERSION:
        raise ParseError(f"unsupported index version {meta.get('version')!r}")

    offsets, ordinals, tfs = arrays["offsets"], arrays["ordinals"], arrays["tfs"]
    postings = {
        term: (ordinals[offsets[i]:offsets[i + 1]], tfs[offsets[i]:offsets[i + 1]])
        for i, term in enumerate(arrays["terms"].tolist())
    }
    return InvertedIndex(
        arrays["passage_ids"].tolist(),
        postings,
        arrays["doc_lengths"],
        float(meta["avg_doc_length"]),
        k1=float(meta["k1"]),
        b=float(meta["b"]),
        stopwords=bool(meta["stopwords"]),
    )
