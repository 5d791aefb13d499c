"""Document and parallel-corpus ingestion.

Sentence segmentation is rule based: a sentence ends at a run of terminal
punctuation (optionally followed by closing quotes or brackets). ASCII
terminators only end a sentence when followed by whitespace or the end of
the text; CJK full-width terminators end it unconditionally.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CorpusFormatError, EmptyDocument, ZeroLengthPair

CJK_LANGS = frozenset({"zh", "ja", "ko"})

_ASCII_TERMINATORS = ".!?"
_CJK_TERMINATORS = "。！？"
_CLOSERS = "\"'”’»」』）)]】》〉"
_BOUNDARY_RE = re.compile(
    "[" + re.escape(_ASCII_TERMINATORS + _CJK_TERMINATORS) + "]+"
    + "[" + re.escape(_CLOSERS) + "]*"
)


def base_lang(lang: str) -> str:
    return lang.replace("_", "-").split("-")[0].lower()


def is_cjk(lang: str) -> bool:
    return base_lang(lang) in CJK_LANGS


@dataclass(frozen=True)
class Sentence:
    index: int
    char_range: tuple[int, int]
    text: str

    @property
    def start(self) -> int:
        return self.char_range[0]

    @property
    def end(self) -> int:
        return self.char_range[1]


@dataclass(frozen=True)
class Document:
    doc_id: str
    lang: str
    text: str
    sentences: tuple[Sentence, ...]

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        prev_end = 0
        for i, sent in enumerate(self.sentences):
            start, end = sent.char_range
            if sent.index != i:
                raise ValueError(f"sentence indices must be contiguous from 0, got {sent.index} at {i}")
            if not prev_end <= start < end <= len(self.text):
                raise ValueError(f"sentence {i} has invalid span {sent.char_range}")
            if self.text[start:end] != sent.text:
                raise ValueError(f"sentence {i} text does not match its span")
            prev_end = end

    @property
    def gaps(self) -> list[str]:
        """Text outside sentences: before the first, between each pair, after the last."""
        bounds = [0] + [p for s in self.sentences for p in s.char_range] + [len(self.text)]
        return [self.text[bounds[k]:bounds[k + 1]] for k in range(0, len(bounds), 2)]

    def reconstruct(self) -> str:
        gaps = self.gaps
        parts = [gaps[0]]
        for sent, gap in zip(self.sentences, gaps[1:]):
            parts.append(sent.text)
            parts.append(gap)
        return "".join(parts)

    def __len__(self) -> int:
        return len(self.sentences)

    @classmethod
    def from_text(cls, doc_id: str, text: str, lang: str) -> "Document":
        return cls(doc_id, lang, text, tuple(segment_document(text, lang)))

    @classmethod
    def from_sentences(cls, doc_id: str, sentences: Sequence[str], lang: str) -> "Document":
        """Build a document from pre-segmented sentences, bypassing the splitter.

        Sentences are joined with a single space, or with nothing for CJK
        languages.
        """
        texts = [s.strip() for s in sentences]
        if not texts or any(not t for t in texts):
            raise EmptyDocument(f"document {doc_id!r} has an empty sentence")
        sep = "" if is_cjk(lang) else " "
        spans, pos = [], 0
        for i, t in enumerate(texts):
            if i:
                pos += len(sep)
            spans.append(Sentence(i, (pos, pos + len(t)), t))
            pos += len(t)
        return cls(doc_id, lang, sep.join(texts), tuple(spans))


@dataclass(frozen=True)
class ParallelPair:
    src: str
    tgt: str
    src_lang: str
    tgt_lang: str

    def __post_init__(self):
        if not self.src.strip() or not self.tgt.strip():
            raise ZeroLengthPair(f"empty side in pair ({self.src!r}, {self.tgt!r})")


def segment_document(text: str, lang: str) -> list[Sentence]:
    if not text.strip():
        raise EmptyDocument("document is empty or whitespace only")
    cuts = []
    for m in _BOUNDARY_RE.finditer(text):
        end = m.end()
        cjk = any(ch in _CJK_TERMINATORS for ch in m.group())
        if cjk or end == len(text) or text[end].isspace():
            cuts.append(end)
    if not cuts or cuts[-1] != len(text):
        cuts.append(len(text))

    sentences: list[Sentence] = []
    start = 0
    for cut in cuts:
        chunk = text[start:cut]
        stripped = chunk.strip()
        if stripped:
            lead = len(chunk) - len(chunk.lstrip())
            s = start + lead
            e = s + len(stripped)
            sentences.append(Sentence(len(sentences), (s, e), stripped))
        start = cut
    return sentences


_QUOTE_MAP = str.maketrans({
    "\u201c": '"', "\u201d": '"', "\u201e": '"', "\u201f": '"', "\u00ab": '"', "\u00bb": '"',
    "\u2018": "'", "\u2019": "'", "\u201a": "'", "\u201b": "'",
    "\u00a0": " ", "\u202f": " ",
})
_SPACE_RUN = re.compile(" {2,}")


def normalize_punctuation(text: str) -> str:
    """Deterministic subset of Moses punctuation normalization.

    Curly and low quotes and guillemets become ASCII quotes, the ellipsis
    character becomes three dots, non-breaking spaces become spaces, and runs
    of spaces collapse to one. Idempotent.
    """
    text = text.translate(_QUOTE_MAP).replace("\u2026", "...")
    return _SPACE_RUN.sub(" ", text)


def tokenize_units(text: str, lang: str) -> list[str]:
    """Counting units: non-space characters for zh/ja/ko, whitespace tokens otherwise."""
    if is_cjk(lang):
        return [ch for ch in text if not ch.isspace()]
    return text.split()


def length_ratio_filter(pairs: Iterable[ParallelPair], max_ratio: float = 1.5) -> list[ParallelPair]:
    if max_ratio <= 0:
        raise ValueError("max_ratio must be positive")
    kept = []
    for pair in pairs:
        ls = len(tokenize_units(pair.src, pair.src_lang))
        lt = len(tokenize_units(pair.tgt, pair.tgt_lang))
        if ls == 0 or lt == 0:
            raise ZeroLengthPair(f"zero-length side in pair ({pair.src!r}, {pair.tgt!r})")
        # multiply instead of dividing so a ratio of exactly max_ratio is kept
        if max(ls, lt) <= max_ratio * min(ls, lt):
            kept.append(pair)
    return kept


def read_parallel_tsv(path: str | Path, src_lang: str, tgt_lang: str) -> list[ParallelPair]:
    pairs = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusFormatError(f"expected 2 tab-separated fields, got {len(fields)}", lineno)
            try:
                pairs.append(ParallelPair(fields[0].strip(), fields[1].strip(), src_lang, tgt_lang))
            except ZeroLengthPair as exc:
                raise CorpusFormatError(str(exc), lineno) from exc
    return pairs


def read_segmented_documents(path: str | Path, lang: str, doc_prefix: str | None = None) -> list[Document]:
    """Read one-sentence-per-line documents separated by blank lines."""
    path = Path(path)
    prefix = doc_prefix if doc_prefix is not None else path.stem
    blocks: list[list[str]] = [[]]
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            blocks[-1].append(line)
        elif blocks[-1]:
            blocks.append([])
    blocks = [b for b in blocks if b]
    if not blocks:
        raise EmptyDocument(f"{path} contains no sentences")
    return [Document.from_sentences(f"{prefix}-{i}", b, lang) for i, b in enumerate(blocks)]


def write_segmented_documents(path: str | Path, docs: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n\n".join("\n".join(doc) for doc in docs) + "\n")
