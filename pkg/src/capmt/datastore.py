"""Parallel-sentence datastore with exact cosine, BM25 and random retrieval."""

from __future__ import annotations

import base64
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import ParallelPair, tokenize_units
from .errors import (
    EmptyDatastore,
    IndexBuildError,
    IndexFormatError,
    InsufficientEntries,
    QueryDimensionError,
    ZeroLengthPair,
)

FORMAT_VERSION = 1
BM25_K1 = 1.2
BM25_B = 0.75
NORM_TOL = 1e-6

Embedder = Callable[[list[str]], Sequence[Sequence[float]]]


def bm25_tokenize(text: str, lang: str) -> list[str]:
    return [t.casefold() for t in tokenize_units(text, lang)]


@dataclass(frozen=True)
class DatastoreEntry:
    id: int
    pair: ParallelPair
    embedding: np.ndarray  # float32, unit norm

    def __eq__(self, other):
        if not isinstance(other, DatastoreEntry):
            return NotImplemented
        return (
            self.id == other.id
            and self.pair == other.pair
            and self.embedding.dtype == other.embedding.dtype
            and self.embedding.tobytes() == other.embedding.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class BM25Stats:
    doc_freq: dict[str, int]
    term_counts: tuple[Counter, ...]
    doc_lengths: tuple[int, ...]
    avg_length: float

    @classmethod
    def from_texts(cls, texts: Sequence[str], lang: str) -> "BM25Stats":
        counts = tuple(Counter(bm25_tokenize(t, lang)) for t in texts)
        df: Counter = Counter()
        for c in counts:
            df.update(c.keys())
        lengths = tuple(sum(c.values()) for c in counts)
        avg = sum(lengths) / len(lengths) if lengths else 0.0
        return cls(dict(df), counts, lengths, avg)

    def idf(self, term: str) -> float:
        n = len(self.doc_lengths)
        df = self.doc_freq.get(term, 0)
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)


@dataclass
class DatastoreIndex:
    entries: list[DatastoreEntry]
    dim: int
    bm25: BM25Stats = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dim <= 0:
            raise IndexBuildError(f"embedding dimension must be positive, got {self.dim}")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise IndexBuildError("duplicate entry ids")
        for e in self.entries:
            if e.embedding.shape != (self.dim,):
                raise IndexBuildError(f"entry {e.id} has embedding shape {e.embedding.shape}, expected ({self.dim},)")
            if abs(float(np.linalg.norm(e.embedding.astype(np.float64))) - 1.0) > NORM_TOL:
                raise IndexBuildError(f"entry {e.id} embedding is not unit norm")
        self._matrix = (
            np.stack([e.embedding for e in self.entries]).astype(np.float64)
            if self.entries else np.zeros((0, self.dim))
        )
        self._ids = np.array(ids, dtype=np.int64)
        self.bm25 = BM25Stats.from_texts([e.pair.src for e in self.entries], self.src_lang)

    @property
    def src_lang(self) -> str:
        return self.entries[0].pair.src_lang if self.entries else "und"

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, DatastoreIndex):
            return NotImplemented
        return self.dim == other.dim and self.entries == other.entries and self.bm25 == other.bm25

    # retrieval

    def similarity_scores(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise QueryDimensionError(f"query has shape {q.shape}, index dimension is {self.dim}")
        return self._matrix @ q

    def bm25_scores(self, query_text: str) -> np.ndarray:
        stats = self.bm25
        terms = bm25_tokenize(query_text, self.src_lang)
        scores = np.zeros(len(self.entries))
        if stats.avg_length == 0:
            return scores
        for idx, (counts, dl) in enumerate(zip(stats.term_counts, stats.doc_lengths)):
            norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / stats.avg_length)
            total = 0.0
            for term in terms:
                tf = counts.get(term, 0)
                if tf:
                    total += stats.idf(term) * tf * (BM25_K1 + 1.0) / (tf + norm)
            scores[idx] = total
        return scores

    def _top(self, scores: np.ndarray, k: int) -> list[DatastoreEntry]:
        if k < 1:
            raise ValueError("k must be positive")
        order = np.lexsort((self._ids, -scores))[:k]
        return [self.entries[i] for i in order]


def normalize(vec: Sequence[float]) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise IndexBuildError("cannot normalize a zero or non-finite vector")
    return (v / norm).astype(np.float32)


def build_index(pairs: Sequence[ParallelPair], embedder: Embedder, batch_size: int = 64) -> DatastoreIndex:
    """Embed every pair's source side and build the searchable index."""
    if not pairs:
        raise EmptyDatastore("no pairs to index")
    vectors: list[np.ndarray] = []
    for start in range(0, len(pairs), batch_size):
        batch = [p.src for p in pairs[start:start + batch_size]]
        out = list(embedder(batch))
        if len(out) != len(batch):
            raise IndexBuildError(f"embedder returned {len(out)} vectors for {len(batch)} texts")
        vectors.extend(np.asarray(v, dtype=np.float64) for v in out)
    dims = {v.shape for v in vectors}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise IndexBuildError(f"embedder returned inconsistent shapes: {sorted(dims)}")
    dim = vectors[0].shape[0]
    entries = [DatastoreEntry(i, p, normalize(v)) for i, (p, v) in enumerate(zip(pairs, vectors))]
    return DatastoreIndex(entries, dim)


def retrieve_similar(index: DatastoreIndex, query_embedding: Sequence[float], k: int) -> list[DatastoreEntry]:
    return index._top(index.similarity_scores(np.asarray(query_embedding)), k)


def retrieve_bm25(index: DatastoreIndex, query_text: str, k: int) -> list[DatastoreEntry]:
    if not query_text.strip():
        raise ValueError("query text is empty")
    return index._top(index.bm25_scores(query_text), k)


def sample_random(index: DatastoreIndex, k: int, seed: int) -> list[DatastoreEntry]:
    if k > len(index):
        raise InsufficientEntries(f"asked for {k} entries from an index of {len(index)}")
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    picks = rng.choice(len(index), size=k, replace=False)
    return [index.entries[int(i)] for i in picks]


# persistence


def _encode_embedding(vec: np.ndarray) -> str:
    return base64.b64encode(vec.astype("<f4").tobytes()).decode("ascii")


def save_index(index: DatastoreIndex, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"version": FORMAT_VERSION, "dim": index.dim, "count": len(index)}) + "\n")
        for e in index.entries:
            record = {
                "id": e.id,
                "src": e.pair.src,
                "tgt": e.pair.tgt,
                "src_lang": e.pair.src_lang,
                "tgt_lang": e.pair.tgt_lang,
                "embedding": _encode_embedding(e.embedding),
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_index(path: str | Path) -> DatastoreIndex:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    offsets = [0]
    for line in lines[:-1]:
        offsets.append(offsets[-1] + len(line) + 1)

    def parse(lineno: int) -> dict:
        try:
            obj = json.loads(lines[lineno].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IndexFormatError(f"malformed record: {exc}", offsets[lineno]) from exc
        if not isinstance(obj, dict):
            raise IndexFormatError("record is not an object", offsets[lineno])
        return obj

    if not raw:
        raise IndexFormatError("empty index file", 0)
    header = parse(0)
    if header.get("version") != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported index version {header.get('version')!r}", 0)
    dim, count = header.get("dim"), header.get("count")
    if not isinstance(dim, int) or dim <= 0:
        raise IndexFormatError(f"invalid dimension {dim!r}", 0)
    if not isinstance(count, int) or count < 0:
        raise IndexFormatError(f"invalid entry count {count!r}", 0)
    if lines[-1] != b"" or len(lines) - 2 != count:
        raise IndexFormatError(f"expected {count} complete entries, found {max(len(lines) - 2, 0)}", len(raw))

    entries = []
    for lineno in range(1, count + 1):
        rec = parse(lineno)
        try:
            emb = np.frombuffer(base64.b64decode(rec["embedding"], validate=True), dtype="<f4").astype(np.float32)
            pair = ParallelPair(rec["src"], rec["tgt"], rec["src_lang"], rec["tgt_lang"])
            entry_id = rec["id"]
        except (KeyError, ValueError, TypeError, ZeroLengthPair) as exc:
            raise IndexFormatError(f"bad entry: {exc}", offsets[lineno]) from exc
        if emb.shape != (dim,):
            raise IndexFormatError(f"embedding has {emb.shape[0]} values, expected {dim}", offsets[lineno])
        if not isinstance(entry_id, int):
            raise IndexFormatError(f"entry id {entry_id!r} is not an integer", offsets[lineno])
        entries.append(DatastoreEntry(entry_id, pair, emb))
    try:
        return DatastoreIndex(entries, dim)
    except IndexBuildError as exc:
        raise IndexFormatError(str(exc), 0) from exc
