"""Extractive summarization by stopword-filtered word frequency.

Each content word is weighted by its document frequency divided by the
frequency of the most common content word. A sentence scores the mean
weight of its content words, and the top sentences are returned in their
original order.
"""

from __future__ import annotations

import math
import re
import unicodedata
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import AllStopwords, EmptyDocument

DEFAULT_RATIO = 0.3

_SENTENCE_BREAK = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class Document:
    raw: str
    sentences: tuple[str, ...]
    tokens: tuple[tuple[str, ...], ...]

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class WordScoreTable:
    scores: dict[str, float]
    counts: dict[str, int]
    max_count: int


@dataclass(frozen=True)
class Summary:
    indices: tuple[int, ...]
    sentences: tuple[str, ...]
    scores: tuple[float, ...]
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "indices": list(self.indices),
            "sentences": list(self.sentences),
            "scores": list(self.scores),
            "params": dict(self.params),
        }


def _is_word_char(ch: str) -> bool:
    # combining marks keep Sinhala/Devanagari syllables inside one token
    return ch.isalnum() or unicodedata.category(ch).startswith("M")


def tokenize(text: str) -> list[str]:
    tokens, run = [], []
    for ch in text:
        if _is_word_char(ch):
            run.append(ch)
        elif run:
            tokens.append("".join(run).casefold())
            run = []
    if run:
        tokens.append("".join(run).casefold())
    return tokens


def segment(text: str) -> Document:
    """Split ``text`` on ``.``, ``!`` or ``?`` followed by whitespace."""
    if not text or not text.strip():
        raise EmptyDocument("document is empty")
    sentences = tuple(s.strip() for s in _SENTENCE_BREAK.split(text.strip()) if s.strip())
    return Document(text, sentences, tuple(tuple(tokenize(s)) for s in sentences))


@lru_cache(maxsize=8)
def _load_stopwords_cached(path: str | None) -> frozenset[str]:
    if path is None:
        text = resources.files("incident_hub").joinpath("data/stopwords_en.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_stopwords(text.splitlines())


def parse_stopwords(lines: Iterable[str]) -> frozenset[str]:
    words = set()
    for line in lines:
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.casefold())
    return frozenset(words)


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """Stopwords from a one-word-per-line file; the bundled English list by default."""
    return _load_stopwords_cached(None if path is None else str(path))


def score_words(doc: Document, stopwords: Iterable[str]) -> WordScoreTable:
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    counts: dict[str, int] = {}
    for sentence_tokens in doc.tokens:
        for tok in sentence_tokens:
            if tok not in stop:
                counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise AllStopwords("document contains no content words")
    top = max(counts.values())
    return WordScoreTable({w: c / top for w, c in counts.items()}, counts, top)


def score_sentences(doc: Document, table: WordScoreTable) -> list[float]:
    scores = []
    for sentence_tokens in doc.tokens:
        content = [t for t in sentence_tokens if t in table.counts]
        if not content:
            scores.append(0.0)
            continue
        # one exact division, so equal means compare equal regardless of word order
        scores.append(sum(table.counts[t] for t in content) / (table.max_count * len(content)))
    return scores


def selection_size(n: int, ratio: float | None = None, k: int | None = None) -> int:
    if k is not None:
        if k < 1:
            raise ValueError("k must be >= 1")
        return min(n, k)
    if ratio is None:
        ratio = DEFAULT_RATIO
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    # Fraction(str(.)) keeps 0.3 * 10 at exactly 3
    return max(1, min(n, math.ceil(Fraction(str(ratio)) * n)))


def summarize(
    text: str,
    ratio: float | None = None,
    k: int | None = None,
    stopwords: Iterable[str] | None = None,
) -> Summary:
    """Pick the highest-scoring sentences of ``text``.

    Give either ``ratio`` (fraction of sentences, rounded up) or ``k``
    (sentence count); the default is a ratio of 0.3. Score ties go to the
    earlier sentence. Documents without any content word fall back to their
    leading sentences and are flagged with ``params["fallback"]``.
    """
    if ratio is not None and k is not None:
        raise ValueError("give ratio or k, not both")
    doc = segment(text)
    stop = load_stopwords() if stopwords is None else stopwords
    n = len(doc)
    count = selection_size(n, ratio, k)
    params: dict = {"k": k} if k is not None else {"ratio": DEFAULT_RATIO if ratio is None else ratio}
    try:
        table = score_words(doc, stop)
    except AllStopwords:
        params["fallback"] = True
        chosen = list(range(count))
        scores = [0.0] * n
    else:
        params["fallback"] = False
        scores = score_sentences(doc, table)
        ranked = sorted(range(n), key=lambda i: (-scores[i], i))
        chosen = sorted(ranked[:count])
    return Summary(
        indices=tuple(chosen),
        sentences=tuple(doc.sentences[i] for i in chosen),
        scores=tuple(scores),
        params=params,
    )
