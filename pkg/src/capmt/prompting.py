"""Demonstration selection, context summarization and prompt rendering."""

from __future__ import annotations

import enum
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .attention import ContextWindow
from .backend import GenerationRequest
from .corpus import Document
from .datastore import DatastoreEntry, DatastoreIndex, retrieve_bm25, retrieve_similar, sample_random
from .errors import BackendError, TemplateError

DEFAULT_K = 3
MAX_DEMOS = 16
SUMMARY_MAX_NEW_TOKENS = 128

SUMMARY_INSTRUCTION = (
    "Summarize the following text in one or two concise sentences, "
    "keeping its key topics, named entities and information."
)

LANGUAGE_NAMES = {
    "ar": "Arabic", "cs": "Czech", "de": "German", "en": "English", "es": "Spanish",
    "fr": "French", "it": "Italian", "ja": "Japanese", "ko": "Korean", "nl": "Dutch",
    "pl": "Polish", "pt": "Portuguese", "ru": "Russian", "tr": "Turkish", "uk": "Ukrainian",
    "zh": "Chinese",
}


def language_name(code: str) -> str:
    return LANGUAGE_NAMES.get(code.replace("_", "-").split("-")[0].lower(), code)


class StrategyKind(str, enum.Enum):
    ZERO_SHOT = "zero-shot"
    RANDOM = "random"
    BM25 = "bm25"
    SIMILAR = "similar"
    PRECEDENT = "precedent"
    CAP = "cap"

    @property
    def display_name(self) -> str:
        return _DISPLAY[self]


_DISPLAY = {
    StrategyKind.ZERO_SHOT: "Zero-shot",
    StrategyKind.RANDOM: "Random",
    StrategyKind.BM25: "BM25",
    StrategyKind.SIMILAR: "Similar",
    StrategyKind.PRECEDENT: "Precedent",
    StrategyKind.CAP: "Ours",
}
_ALIASES = {"zero_shot": "zero-shot", "zeroshot": "zero-shot", "ours": "cap"}


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    k: int = DEFAULT_K
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.kind is StrategyKind.ZERO_SHOT:
            object.__setattr__(self, "k", 0)
        if self.k < 0:
            raise ValueError("k must be non-negative")

    @classmethod
    def parse(cls, name: str, k: int = DEFAULT_K, seed: int = 0) -> "Strategy":
        key = name.strip().lower()
        return cls(StrategyKind(_ALIASES.get(key, key)), k, seed)

    @property
    def name(self) -> str:
        return self.kind.display_name

    @property
    def uses_datastore(self) -> bool:
        return self.kind in (StrategyKind.RANDOM, StrategyKind.BM25, StrategyKind.SIMILAR, StrategyKind.CAP)


ALL_STRATEGIES = tuple(StrategyKind)


@dataclass(frozen=True)
class Demonstration:
    src: str
    tgt: str
    origin: str  # "datastore", "precedent" or "none"
    origin_id: int | None = None  # datastore entry id or sentence index
    query: str | None = None  # what the retrieval was keyed on

    def __post_init__(self):
        if not self.src or not self.tgt:
            raise ValueError("demonstration sides must be non-empty")

    @classmethod
    def from_entry(cls, entry: DatastoreEntry, query: str) -> "Demonstration":
        return cls(entry.pair.src, entry.pair.tgt, "datastore", entry.id, query)

    def to_dict(self) -> dict:
        return {"src": self.src, "tgt": self.tgt, "origin": self.origin, "origin_id": self.origin_id, "query": self.query}

    @classmethod
    def from_dict(cls, d: dict) -> "Demonstration":
        return cls(d["src"], d["tgt"], d["origin"], d.get("origin_id"), d.get("query"))


@dataclass(frozen=True)
class Summary:
    text: str
    source_sentence_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.source_sentence_indices and not self.text:
            raise ValueError("a summary of a non-empty window must have text")


class Generator(Protocol):
    def generate(self, request: GenerationRequest) -> str: ...


def summary_prompt(sentences: Sequence[str]) -> str:
    return f"{SUMMARY_INSTRUCTION}\n\n{' '.join(sentences)}\n\nSummary:"


def summarize_context(window: ContextWindow, doc: Document, gen: Generator) -> Summary:
    if not window.members:
        return Summary("", ())
    for m in window.members:
        if not 0 <= m < len(doc):
            raise IndexError(f"context member {m} outside document {doc.doc_id!r}")
    prompt = summary_prompt([doc.sentences[m].text for m in window.members])
    request = GenerationRequest(prompt, max_new_tokens=SUMMARY_MAX_NEW_TOKENS, temperature=0.0)
    try:
        text = gen.generate(request).strip()
    except BackendError as exc:
        exc.window = window
        exc.args = (f"{exc} [summarizing {doc.doc_id!r} sentence {window.current}, context {list(window.members)}]",)
        raise
    if not text:
        # a model returning nothing must not look like an empty window
        text = " ".join(doc.sentences[m].text for m in window.members)
    return Summary(text, window.members)


@dataclass
class QueryContext:
    source: str
    sentence_index: int = 0
    doc_id: str = ""
    summary: Summary | None = None
    sentence_embedding: np.ndarray | None = None
    summary_embedding: np.ndarray | None = None


@dataclass
class PrecedentState:
    """Source sentences and this run's own translations so far, for one document."""

    history: dict[int, tuple[str, str]] = field(default_factory=dict)

    def add(self, index: int, source: str, output: str) -> None:
        self.history[index] = (source, output)

    def preceding(self, index: int, k: int) -> list[Demonstration]:
        demos = []
        for j in range(max(0, index - k), index):
            if j in self.history:
                src, out = self.history[j]
                if src and out:
                    demos.append(Demonstration(src, out, "precedent", j, "precedent"))
        return demos


def _sentence_seed(seed: int, doc_id: str, index: int) -> int:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(doc_id.encode("utf-8")), index])
    return int(ss.generate_state(1, np.uint64)[0])


def select_demonstrations(
    strategy: Strategy,
    query: QueryContext,
    index: DatastoreIndex | None = None,
    state: PrecedentState | None = None,
) -> list[Demonstration]:
    kind, k = strategy.kind, strategy.k
    if kind is StrategyKind.ZERO_SHOT or k == 0:
        return []
    if kind is StrategyKind.PRECEDENT:
        return (state or PrecedentState()).preceding(query.sentence_index, k)
    if index is None or len(index) == 0:
        raise ValueError(f"strategy {strategy.name} needs a non-empty datastore")
    if kind is StrategyKind.RANDOM:
        seed = _sentence_seed(strategy.seed, query.doc_id, query.sentence_index)
        return [Demonstration.from_entry(e, "random") for e in sample_random(index, min(k, len(index)), seed)]
    if kind is StrategyKind.BM25:
        return [Demonstration.from_entry(e, "bm25") for e in retrieve_bm25(index, query.source, k)]

    use_summary = kind is StrategyKind.CAP and query.summary is not None and bool(query.summary.text)
    vec = query.summary_embedding if use_summary else query.sentence_embedding
    if vec is None:
        raise ValueError(f"{strategy.name} needs the {'summary' if use_summary else 'sentence'} embedding")
    label = "summary" if use_summary else "sentence"
    return [Demonstration.from_entry(e, label) for e in retrieve_similar(index, vec, k)]


@dataclass(frozen=True)
class PromptTemplate:
    demo_block: str = "{src_lang}: {src}\n{tgt_lang}: {tgt}\n\n"
    query_block: str = "{src_lang}: {src}\n{tgt_lang}:"
    joiner: str = ""

    def __post_init__(self):
        _check_placeholders(self.demo_block, "demo_block", required=("src", "tgt"), allowed=_FIELDS)
        _check_placeholders(self.query_block, "query_block", required=("src",), allowed=_FIELDS - {"tgt"})

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplate":
        """Read ``demo_block``, ``query_block`` and ``joiner`` separated by ``---`` lines."""
        text = Path(path).read_text(encoding="utf-8")
        parts = re.split(r"\n---\n", text)
        if len(parts) != 3:
            raise TemplateError(f"{path}: expected 3 sections separated by '---' lines, found {len(parts)}")
        return cls(*parts)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n---\n".join([self.demo_block, self.query_block, self.joiner]), encoding="utf-8")


_FIELDS = frozenset({"src_lang", "tgt_lang", "src", "tgt"})
_PLACEHOLDER = re.compile(r"\{(\w*)\}")


def _check_placeholders(block: str, name: str, required: Sequence[str], allowed: frozenset) -> None:
    found = set(_PLACEHOLDER.findall(block))
    for ph in required:
        if ph not in found:
            raise TemplateError(f"{name} is missing the {{{ph}}} placeholder", ph)
    for ph in sorted(found - allowed):
        raise TemplateError(f"{name} has unsupported placeholder {{{ph}}}", ph)


def _fill(block: str, values: dict[str, str]) -> str:
    # one regex pass: substituted text is never rescanned for placeholders
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], block)


def render_prompt(
    template: PromptTemplate,
    demos: Sequence[Demonstration],
    src: str,
    langs: tuple[str, str],
    context: str | None = None,
) -> str:
    if len(demos) > MAX_DEMOS:
        raise ValueError(f"at most {MAX_DEMOS} demonstrations, got {len(demos)}")
    names = {"src_lang": language_name(langs[0]), "tgt_lang": language_name(langs[1])}
    blocks = [_fill(template.demo_block, {**names, "src": d.src, "tgt": d.tgt}) for d in demos]
    blocks.append(_fill(template.query_block, {**names, "src": src}))
    prompt = template.joiner.join(blocks)
    if context:
        prompt = f"Context: {context}\n\n{prompt}"
    return prompt.rstrip()
