"""Document-level metrics: d-BLEU, chrF2 and zero-pronoun translation accuracy.

Both corpus metrics score each document as one segment made by joining its
sentences with single spaces, so sentence alignment inside a document does
not matter.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import base_lang, is_cjk
from .errors import AlignmentError, EmptyEvalSet

BLEU_ORDER = 4
CHRF_ORDER = 6
CHRF_BETA = 2.0
_WORD_PUNCT = re.compile(r"\w+|[^\w\s]")


def bleu_tokenize(text: str, lang: str = "en") -> list[str]:
    """Whitespace split with punctuation separated; characters for zh/ja/ko."""
    if is_cjk(lang):
        return [ch for ch in text if not ch.isspace()]
    return _WORD_PUNCT.findall(text)


def _join_docs(docs: Sequence[Sequence[str]]) -> list[str]:
    return [" ".join(s.strip() for s in doc) for doc in docs]


def _check_shapes(hyp_docs, ref_docs) -> None:
    if len(ref_docs) == 0:
        raise EmptyEvalSet("no documents to score")
    if len(hyp_docs) != len(ref_docs):
        raise AlignmentError(f"{len(hyp_docs)} hypothesis documents but {len(ref_docs)} references")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def d_bleu(hyp_docs: Sequence[Sequence[str]], ref_docs: Sequence[Sequence[str]], lang: str = "en") -> float:
    """Corpus BLEU-4 over whole documents, add-one smoothing on orders 2-4."""
    _check_shapes(hyp_docs, ref_docs)
    correct = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    sys_len = ref_len = 0
    for hyp, ref in zip(_join_docs(hyp_docs), _join_docs(ref_docs)):
        h, r = bleu_tokenize(hyp, lang), bleu_tokenize(ref, lang)
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, BLEU_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum((hc & rc).values())
            total[n - 1] += max(len(h) - n + 1, 0)
    if sys_len == 0 or correct[0] == 0:
        return 0.0
    log_sum = 0.0
    for n in range(BLEU_ORDER):
        c, t = correct[n], total[n]
        if n > 0:
            c, t = c + 1, t + 1
        log_sum += math.log(c / t)
    bp = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    return 100.0 * bp * math.exp(log_sum / BLEU_ORDER)


def _char_ngrams(text: str, n: int) -> Counter:
    return Counter(text[i:i + n] for i in range(len(text) - n + 1))


def chrf_statistics(hyp: str, ref: str, order: int = CHRF_ORDER) -> list[tuple[int, int, int]]:
    """Per order: (hypothesis n-grams, reference n-grams, matched n-grams), whitespace removed.

    Hypothesis n-grams of an order the reference is too short to have are
    not counted, so a short reference does not drag precision down.
    """
    h = "".join(hyp.split())
    r = "".join(ref.split())
    stats = []
    for n in range(1, order + 1):
        hc, rc = _char_ngrams(h, n), _char_ngrams(r, n)
        hyp_count = sum(hc.values()) if rc else 0
        stats.append((hyp_count, sum(rc.values()), sum((hc & rc).values())))
    return stats


def chrf_from_statistics(stats: Sequence[tuple[int, int, int]], beta: float = CHRF_BETA) -> float:
    prec = rec = 0.0
    effective = 0
    for hyp_n, ref_n, match in stats:
        if hyp_n > 0 and ref_n > 0:
            prec += match / hyp_n
            rec += match / ref_n
            effective += 1
    if effective == 0:
        return 0.0
    prec /= effective
    rec /= effective
    if prec + rec == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def chrf2(hyp_docs: Sequence[Sequence[str]], ref_docs: Sequence[Sequence[str]], lang: str = "en") -> float:
    """Corpus chrF with character orders 1-6, no word n-grams, beta 2."""
    _check_shapes(hyp_docs, ref_docs)
    totals = [[0, 0, 0] for _ in range(CHRF_ORDER)]
    for hyp, ref in zip(_join_docs(hyp_docs), _join_docs(ref_docs)):
        for acc, st in zip(totals, chrf_statistics(hyp, ref)):
            for j in range(3):
                acc[j] += st[j]
    return chrf_from_statistics([tuple(t) for t in totals])


@dataclass(frozen=True)
class ZptAnnotation:
    source: str
    reference: str
    expected_pronouns: tuple[str, ...]

    def __post_init__(self):
        pronouns = tuple(p.strip() for p in self.expected_pronouns)
        if not pronouns or any(not p or len(p.split()) != 1 for p in pronouns):
            raise ValueError(f"expected pronouns must be single non-empty tokens: {self.expected_pronouns!r}")
        object.__setattr__(self, "expected_pronouns", pronouns)


def contains_pronoun(output: str, pronouns: Iterable[str]) -> bool:
    for p in pronouns:
        if re.search(r"(?<!\w)" + re.escape(p) + r"(?!\w)", output, flags=re.IGNORECASE):
            return True
    return False


def zpt_accuracy(outputs: Sequence, annotations: Sequence[ZptAnnotation]) -> float:
    """Share of outputs containing any expected pronoun as a whole word, case-insensitively.

    ``outputs`` may be strings or objects with an ``output`` attribute.
    """
    if len(outputs) != len(annotations):
        raise AlignmentError(f"{len(outputs)} outputs but {len(annotations)} annotations")
    if not annotations:
        raise EmptyEvalSet("no ZPT annotations")
    correct = 0
    for out, ann in zip(outputs, annotations):
        text = out if isinstance(out, str) else out.output
        correct += contains_pronoun(text, ann.expected_pronouns)
    return correct / len(annotations)


def read_zpt_annotations(path: str | Path) -> list[ZptAnnotation]:
    anns = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            anns.append(ZptAnnotation(d["source"], d["reference"], tuple(d["expected_pronouns"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise AlignmentError(f"{path}:{lineno}: bad ZPT annotation: {exc}") from exc
    return anns


@dataclass
class PairScores:
    d_bleu: float
    chrf2: float
    zpt_accuracy: float | None = None

    def __post_init__(self):
        for name in ("d_bleu", "chrf2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0 + 1e-9:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if self.zpt_accuracy is not None and not 0.0 <= self.zpt_accuracy <= 1.0:
            raise ValueError(f"zpt_accuracy={self.zpt_accuracy} outside [0, 1]")

    def to_dict(self) -> dict:
        d = {"d_bleu": round(self.d_bleu, 4), "chrf2": round(self.chrf2, 4)}
        if self.zpt_accuracy is not None:
            d["zpt_accuracy"] = round(self.zpt_accuracy, 6)
        return d


@dataclass
class EvalReport:
    scores: dict[str, PairScores]
    config: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scores": {pair: s.to_dict() for pair, s in self.scores.items()},
            "counts": self.counts,
            "config": self.config,
        }

    def render_table(self) -> str:
        lines = [f"{'pair':<10}{'d-BLEU':>10}{'chrF2':>10}{'ZPT':>10}"]
        for pair, s in self.scores.items():
            zpt = f"{100 * s.zpt_accuracy:.2f}" if s.zpt_accuracy is not None else "-"
            lines.append(f"{pair:<10}{s.d_bleu:>10.2f}{s.chrf2:>10.2f}{zpt:>10}")
        return "\n".join(lines)


def group_outputs(records: Sequence) -> tuple[list[str], list[list[str]]]:
    """Group record outputs into documents (first-appearance order), sentences by index."""
    docs: dict[str, dict[int, str]] = {}
    for r in records:
        docs.setdefault(r.doc_id, {})[r.sentence_index] = r.output
    return list(docs), [[d[i] for i in sorted(d)] for d in docs.values()]


def evaluate_records(
    records: Sequence,
    ref_docs: Sequence[Sequence[str]],
    src_lang: str,
    tgt_lang: str,
    annotations: Sequence[ZptAnnotation] | None = None,
    config: dict | None = None,
) -> EvalReport:
    lang_pair = f"{base_lang(src_lang)}-{base_lang(tgt_lang)}"
    _, hyp_docs = group_outputs(records)
    scores = PairScores(
        d_bleu(hyp_docs, ref_docs, tgt_lang),
        chrf2(hyp_docs, ref_docs, tgt_lang),
        zpt_accuracy(list(records), annotations) if annotations is not None else None,
    )
    counts = {"documents": len(hyp_docs), "sentences": sum(len(d) for d in hyp_docs)}
    return EvalReport({lang_pair: scores}, config or {}, counts)
