"""Sentence-level attention scores and dynamic context selection.

Token-token attention is the head average of a model's final attention
layer. A token's score toward a sentence is the max (or, for the ablation,
the mean) of its attention over that sentence's visible tokens; the score of
sentence I toward sentence S is the mean of its tokens' scores toward S.
The N highest-scoring sentences, kept in document order, form the context.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AbsentScore, InvalidTensor, SelfScore

ROW_SUM_TOL = 1e-3
DEFAULT_N_CONTEXT = 3


class AggregationMode(str, enum.Enum):
    MAX = "max"
    AVG = "avg"


@dataclass(frozen=True)
class AttentionTensor:
    """Final-layer attention, shape (heads, tokens, tokens)."""

    weights: np.ndarray
    causal: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        validate_tensor(w, self.causal)

    @property
    def num_heads(self) -> int:
        return self.weights.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.weights.shape[1]


def validate_tensor(weights: np.ndarray, causal: bool) -> None:
    if weights.ndim != 3 or weights.shape[1] != weights.shape[2] or 0 in weights.shape:
        raise InvalidTensor(f"expected a non-empty H x T x T array, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise InvalidTensor("attention contains NaN or Inf")
    if np.any(weights < 0):
        raise InvalidTensor("attention contains negative weights")
    if causal:
        upper = np.triu(np.ones(weights.shape[1:], dtype=bool), k=1)
        if np.any(weights[:, upper] != 0):
            raise InvalidTensor("causal attention has weight on future positions")
    sums = weights.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL)
    if len(bad):
        h, i = bad[0]
        raise InvalidTensor(f"head {h} row {i} sums to {sums[h, i]:.6f}, expected 1")


@dataclass(frozen=True)
class SentenceMap:
    """Token to sentence assignment. ``-1`` marks special tokens (no sentence)."""

    token_to_sentence: np.ndarray
    sentence_tokens: tuple[np.ndarray, ...]

    def __post_init__(self):
        t2s = np.asarray(self.token_to_sentence, dtype=np.int64)
        object.__setattr__(self, "token_to_sentence", t2s)
        toks = tuple(np.asarray(t, dtype=np.int64) for t in self.sentence_tokens)
        object.__setattr__(self, "sentence_tokens", toks)
        for s, idx in enumerate(toks):
            if len(idx) and (np.any(np.diff(idx) <= 0) or np.any(t2s[idx] != s)):
                raise ValueError(f"sentence {s} token list is inconsistent with token_to_sentence")
        if sum(len(t) for t in toks) != int(np.sum(t2s >= 0)):
            raise ValueError("token_to_sentence assigns tokens to unknown sentences")

    @classmethod
    def from_assignments(cls, assignment: Sequence[int | None], num_sentences: int | None = None) -> "SentenceMap":
        t2s = np.array([-1 if a is None else a for a in assignment], dtype=np.int64)
        if num_sentences is None:
            num_sentences = int(t2s.max()) + 1 if len(t2s) and t2s.max() >= 0 else 0
        groups = tuple(np.flatnonzero(t2s == s) for s in range(num_sentences))
        return cls(t2s, groups)

    @classmethod
    def from_char_ranges(
        cls, token_ranges: Sequence[tuple[int, int]], sentence_ranges: Sequence[tuple[int, int]]
    ) -> "SentenceMap":
        """Assign each token to the sentence its character span overlaps most.

        Tokens with empty spans (specials) or lying wholly in inter-sentence
        whitespace map to no sentence. Overlap ties go to the earlier sentence.
        """
        starts = np.array([s for s, _ in sentence_ranges], dtype=np.int64)
        assignment: list[int | None] = []
        for ts, te in token_ranges:
            best, best_overlap = None, 0
            if te > ts:
                # sentences are sorted and disjoint; only neighbours of ts can overlap
                k = max(int(np.searchsorted(starts, ts, side="right")) - 1, 0)
                while k < len(sentence_ranges) and sentence_ranges[k][0] < te:
                    ss, se = sentence_ranges[k]
                    overlap = min(te, se) - max(ts, ss)
                    if overlap > best_overlap:
                        best, best_overlap = k, overlap
                    k += 1
            assignment.append(best)
        return cls.from_assignments(assignment, len(sentence_ranges))

    @property
    def num_sentences(self) -> int:
        return len(self.sentence_tokens)

    @property
    def num_tokens(self) -> int:
        return len(self.token_to_sentence)


@dataclass(frozen=True)
class SentenceAttentionMatrix:
    """Sentence-by-sentence scores; NaN marks an absent pair (including the diagonal)."""

    scores: np.ndarray
    mode: AggregationMode

    def is_present(self, current: int, other: int) -> bool:
        return bool(np.isfinite(self.scores[current, other]))

    def to_nested(self) -> list[list[float | None]]:
        return [[float(v) if np.isfinite(v) else None for v in row] for row in self.scores]


@dataclass(frozen=True)
class ContextWindow:
    current: int
    members: tuple[int, ...]
    n_requested: int

    def __post_init__(self):
        members = tuple(int(m) for m in self.members)
        object.__setattr__(self, "members", members)
        if any(b <= a for a, b in zip(members, members[1:])):
            raise ValueError(f"context members must be strictly increasing: {members}")
        if self.current in members:
            raise ValueError("the current sentence cannot be its own context")
        if len(members) > self.n_requested:
            raise ValueError("more context members than requested")

    def __len__(self) -> int:
        return len(self.members)


def average_heads(tensor: AttentionTensor | np.ndarray) -> np.ndarray:
    weights = tensor.weights if isinstance(tensor, AttentionTensor) else np.asarray(tensor, dtype=np.float64)
    if weights.ndim != 3:
        raise InvalidTensor(f"expected H x T x T weights, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise InvalidTensor("attention contains NaN or Inf")
    return weights.mean(axis=0)


def _visible(tokens: np.ndarray, i: int, causal: bool) -> np.ndarray:
    return tokens[tokens <= i] if causal else tokens


def token_sentence_score(
    matrix: np.ndarray,
    token: int,
    sentence: int,
    smap: SentenceMap,
    mode: AggregationMode = AggregationMode.MAX,
    causal: bool = True,
) -> float:
    cols = _visible(smap.sentence_tokens[sentence], token, causal)
    if len(cols) == 0:
        raise AbsentScore(f"token {token} sees no token of sentence {sentence}")
    values = matrix[token, cols]
    if AggregationMode(mode) is AggregationMode.MAX:
        return float(values.max())
    return float(values.sum() / len(values))


def sentence_sentence_score(
    matrix: np.ndarray,
    current: int,
    other: int,
    smap: SentenceMap,
    mode: AggregationMode = AggregationMode.MAX,
    causal: bool = True,
) -> float:
    if current == other:
        raise SelfScore(f"sentence {current} scored against itself")
    rows = smap.sentence_tokens[current]
    if len(rows) == 0 or len(smap.sentence_tokens[other]) == 0:
        raise AbsentScore(f"sentence {current} or {other} has no tokens")
    values = []
    for i in rows:
        try:
            values.append(token_sentence_score(matrix, int(i), other, smap, mode, causal))
        except AbsentScore:
            continue
    if not values:
        raise AbsentScore(f"sentence {current} sees no token of sentence {other}")
    return sum(values) / len(values)


def sentence_attention(
    matrix: np.ndarray,
    smap: SentenceMap,
    mode: AggregationMode = AggregationMode.MAX,
    causal: bool = True,
    rows: Sequence[int] | None = None,
) -> SentenceAttentionMatrix:
    """Score every ordered sentence pair (or only the pairs whose first member is in ``rows``)."""
    mode = AggregationMode(mode)
    matrix = np.asarray(matrix, dtype=np.float64)
    n_sent = smap.num_sentences
    T = matrix.shape[0]
    if smap.num_tokens != T:
        raise ValueError(f"sentence map covers {smap.num_tokens} tokens, matrix has {T}")
    positions = np.arange(T)

    # token-to-sentence scores, NaN where a token sees nothing of the sentence
    ts = np.full((T, n_sent), np.nan)
    for s, cols in enumerate(smap.sentence_tokens):
        if len(cols) == 0:
            continue
        sub = matrix[:, cols]
        visible = cols[None, :] <= positions[:, None] if causal else np.ones(sub.shape, dtype=bool)
        counts = visible.sum(axis=1)
        seen = counts > 0
        if mode is AggregationMode.MAX:
            agg = np.where(visible, sub, -np.inf).max(axis=1)
        else:
            agg = np.where(visible, sub, 0.0).sum(axis=1) / np.maximum(counts, 1)
        ts[seen, s] = agg[seen]

    scores = np.full((n_sent, n_sent), np.nan)
    wanted = range(n_sent) if rows is None else rows
    for current in wanted:
        toks = smap.sentence_tokens[current]
        if len(toks) == 0:
            continue
        block = ts[toks]
        present = np.isfinite(block)
        counts = present.sum(axis=0)
        sums = np.where(present, block, 0.0).sum(axis=0)
        row = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        row[current] = np.nan
        scores[current] = row
    return SentenceAttentionMatrix(scores, mode)


def select_context(sentence_scores: SentenceAttentionMatrix | np.ndarray, current: int, n: int = DEFAULT_N_CONTEXT) -> ContextWindow:
    """Top-``n`` sentences by score toward ``current``, returned in document order.

    Absent pairs are never candidates; equal scores prefer the earlier sentence.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    scores = sentence_scores.scores if isinstance(sentence_scores, SentenceAttentionMatrix) else np.asarray(sentence_scores)
    if not 0 <= current < scores.shape[0]:
        raise IndexError(f"current sentence {current} out of range")
    row = scores[current]
    candidates = [j for j in range(len(row)) if j != current and np.isfinite(row[j])]
    ranked = sorted(candidates, key=lambda j: (-row[j], j))
    return ContextWindow(current, tuple(sorted(ranked[:n])), n)


def fixed_context(current: int, total: int, before: int = 2, after: int = 2) -> ContextWindow:
    """Fixed window of up to ``before`` preceding and ``after`` following sentences."""
    if not 0 <= current < total:
        raise IndexError(f"current sentence {current} out of range for {total} sentences")
    lo = max(0, current - before)
    hi = min(total - 1, current + after)
    members = tuple(j for j in range(lo, hi + 1) if j != current)
    return ContextWindow(current, members, max(before + after, 1))
