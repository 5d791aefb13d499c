"""End-to-end translation runs and strategy comparisons."""

from __future__ import annotations

import enum
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attention import (
    DEFAULT_N_CONTEXT,
    AggregationMode,
    ContextWindow,
    SentenceMap,
    average_heads,
    fixed_context,
    select_context,
    sentence_attention,
)
from .backend import AttentionResponse, Backend, BackendConfig, GenerationRequest
from .corpus import Document, base_lang
from .datastore import DatastoreIndex, normalize
from .errors import BackendError, CapError, DocumentFailed
from .evaluation import EvalReport, ZptAnnotation, evaluate_records
from .prompting import (
    DEFAULT_K,
    Demonstration,
    PrecedentState,
    PromptTemplate,
    QueryContext,
    Strategy,
    StrategyKind,
    Summary,
    render_prompt,
    select_demonstrations,
    summarize_context,
)

log = logging.getLogger(__name__)

TRANSLATION_MAX_NEW_TOKENS = 256


class WindowMode(str, enum.Enum):
    DYNAMIC = "dynamic"
    FIXED = "fixed"


class AttentionPass(str, enum.Enum):
    PREFIX = "prefix"  # one pass per sentence over the document up to it
    DOCUMENT = "document"  # one pass over the whole document


@dataclass(frozen=True)
class RunConfig:
    strategy: Strategy = field(default_factory=lambda: Strategy(StrategyKind.CAP))
    n_context: int = DEFAULT_N_CONTEXT
    k_demos: int = DEFAULT_K
    attention_mode: AggregationMode = AggregationMode.MAX
    window_mode: WindowMode = WindowMode.DYNAMIC
    attention_pass: AttentionPass = AttentionPass.PREFIX
    bidirectional: bool = False
    ablation: bool = False
    prepend_context: bool = False
    seed: int = 0
    src_lang: str = "de"
    tgt_lang: str = "en"
    max_new_tokens: int = TRANSLATION_MAX_NEW_TOKENS
    template: PromptTemplate = field(default_factory=PromptTemplate)
    backend: BackendConfig = field(default_factory=BackendConfig)
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "attention_mode", AggregationMode(self.attention_mode))
        object.__setattr__(self, "window_mode", WindowMode(self.window_mode))
        object.__setattr__(self, "attention_pass", AttentionPass(self.attention_pass))
        if self.n_context < 1:
            raise ValueError("n_context must be positive")
        if self.k_demos < 0:
            raise ValueError("k_demos must be non-negative")
        if self.window_mode is WindowMode.FIXED and not self.ablation:
            raise ValueError("the fixed context window is an ablation; set ablation=True to use it")
        # Strategy itself forces k = 0 for zero-shot
        object.__setattr__(self, "strategy", Strategy(self.strategy.kind, self.k_demos, self.seed))

    def for_strategy(self, kind: StrategyKind | str) -> "RunConfig":
        return replace(self, strategy=Strategy(StrategyKind(kind), self.k_demos, self.seed))

    @property
    def lang_pair(self) -> str:
        return f"{base_lang(self.src_lang)}-{base_lang(self.tgt_lang)}"

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.kind.value,
            "n_context": self.n_context,
            "k_demos": self.strategy.k,
            "attention_mode": self.attention_mode.value,
            "window_mode": self.window_mode.value,
            "attention_pass": self.attention_pass.value,
            "bidirectional": self.bidirectional,
            "ablation": self.ablation,
            "prepend_context": self.prepend_context,
            "seed": self.seed,
            "src_lang": self.src_lang,
            "tgt_lang": self.tgt_lang,
            "max_new_tokens": self.max_new_tokens,
            "backend": self.backend.to_dict(),
        }


@dataclass
class TranslationRecord:
    doc_id: str
    sentence_index: int
    strategy: str
    source: str
    output: str
    demonstrations: list[Demonstration] = field(default_factory=list)
    context_members: list[int] | None = None
    summary: str | None = None
    lang_pair: str = ""
    status: str = "ok"
    timing: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "doc_id": self.doc_id,
            "sentence_index": self.sentence_index,
            "strategy": self.strategy,
            "lang_pair": self.lang_pair,
            "source": self.source,
            "output": self.output,
            "demonstrations": [x.to_dict() for x in self.demonstrations],
            "context_members": self.context_members,
            "summary": self.summary,
            "status": self.status,
        }
        if include_timing:
            d["timing"] = {k: round(v, 6) for k, v in self.timing.items()}
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TranslationRecord":
        return cls(
            doc_id=d["doc_id"],
            sentence_index=d["sentence_index"],
            strategy=d["strategy"],
            source=d["source"],
            output=d["output"],
            demonstrations=[Demonstration.from_dict(x) for x in d.get("demonstrations", [])],
            context_members=d.get("context_members"),
            summary=d.get("summary"),
            lang_pair=d.get("lang_pair", ""),
            status=d.get("status", "ok"),
            timing=d.get("timing", {}),
        )


def sentence_map_for(response: AttentionResponse, doc: Document, upto: int | None = None) -> SentenceMap:
    sentences = doc.sentences if upto is None else doc.sentences[: upto + 1]
    return SentenceMap.from_char_ranges([t.char_range for t in response.tokens], [s.char_range for s in sentences])


def attention_input(doc: Document, current: int, cfg: RunConfig) -> tuple[str, int | None]:
    """Text to send for attention and the last sentence it covers (None for all)."""
    if cfg.attention_pass is AttentionPass.DOCUMENT:
        return doc.text, None
    return doc.text[: doc.sentences[current].end], current


def window_from_attention(
    response: AttentionResponse, doc: Document, current: int, cfg: RunConfig, upto: int | None
) -> tuple[ContextWindow, "np.ndarray", SentenceMap, "np.ndarray"]:
    smap = sentence_map_for(response, doc, upto)
    matrix = average_heads(response.tensor)
    sam = sentence_attention(matrix, smap, cfg.attention_mode, causal=response.tensor.causal, rows=[current])
    scores = sam.scores.copy()
    if not cfg.bidirectional:
        scores[current, current + 1:] = np.nan
    window = select_context(scores, current, cfg.n_context)
    return window, matrix, smap, scores


class _DocumentRun:
    def __init__(self, doc: Document, cfg: RunConfig, index: DatastoreIndex | None, backend: Backend):
        self.doc = doc
        self.cfg = cfg
        self.index = index
        self.backend = backend
        self.state = PrecedentState()
        self._doc_attention: AttentionResponse | None = None

    def context_window(self, i: int) -> ContextWindow:
        cfg, doc = self.cfg, self.doc
        if cfg.window_mode is WindowMode.FIXED:
            return fixed_context(i, len(doc))
        if len(doc) == 1 or (i == 0 and not cfg.bidirectional):
            return ContextWindow(i, (), cfg.n_context)
        text, upto = attention_input(doc, i, cfg)
        if upto is None:
            if self._doc_attention is None:
                self._doc_attention = self.backend.attention(text)
            response = self._doc_attention
        else:
            response = self.backend.attention(text)
        return window_from_attention(response, doc, i, cfg, upto)[0]

    def translate_sentence(self, i: int) -> TranslationRecord:
        cfg, doc = self.cfg, self.doc
        kind = cfg.strategy.kind
        sent = doc.sentences[i]
        timing: dict[str, float] = {}
        query = QueryContext(sent.text, i, doc.doc_id)
        members: list[int] | None = None
        summary: Summary | None = None
        context_text = None

        if kind is StrategyKind.CAP:
            t0 = time.perf_counter()
            window = self.context_window(i)
            timing["context"] = time.perf_counter() - t0
            members = list(window.members)
            if window.members:
                t0 = time.perf_counter()
                summary = summarize_context(window, doc, self.backend)
                timing["summarize"] = time.perf_counter() - t0
                context_text = " ".join(doc.sentences[m].text for m in window.members)
            query.summary = summary
            t0 = time.perf_counter()
            if summary is not None and summary.text:
                query.summary_embedding = normalize(self.backend.embed([summary.text])[0])
            else:
                query.sentence_embedding = normalize(self.backend.embed([sent.text])[0])
            timing["embed"] = time.perf_counter() - t0
        elif kind is StrategyKind.SIMILAR:
            t0 = time.perf_counter()
            query.sentence_embedding = normalize(self.backend.embed([sent.text])[0])
            timing["embed"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        demos = select_demonstrations(cfg.strategy, query, self.index, self.state)
        timing["retrieve"] = time.perf_counter() - t0

        prompt = render_prompt(
            cfg.template, demos, sent.text, (cfg.src_lang, cfg.tgt_lang),
            context=context_text if cfg.prepend_context else None,
        )
        t0 = time.perf_counter()
        output = self.backend.generate(
            GenerationRequest(prompt, max_new_tokens=cfg.max_new_tokens, temperature=0.0, stop=("\n",))
        ).strip()
        timing["generate"] = time.perf_counter() - t0
        self.state.add(i, sent.text, output)

        return TranslationRecord(
            doc_id=doc.doc_id,
            sentence_index=i,
            strategy=cfg.strategy.name,
            source=sent.text,
            output=output,
            demonstrations=demos,
            context_members=members,
            summary=summary.text if summary is not None else None,
            lang_pair=cfg.lang_pair,
            timing=timing,
        )


def translate_document(
    doc: Document, cfg: RunConfig, index: DatastoreIndex | None, backend: Backend
) -> list[TranslationRecord]:
    """Translate ``doc`` sentence by sentence.

    A backend error stops the document: completed records are marked
    ``failed`` and carried by the raised :class:`DocumentFailed`.
    """
    if cfg.strategy.uses_datastore and cfg.strategy.k > 0 and (index is None or len(index) == 0):
        raise ValueError(f"strategy {cfg.strategy.name} needs a datastore index")
    run = _DocumentRun(doc, cfg, index, backend)
    records: list[TranslationRecord] = []
    for i in range(len(doc)):
        try:
            records.append(run.translate_sentence(i))
        except BackendError as exc:
            for r in records:
                r.status = "failed"
            raise DocumentFailed(doc.doc_id, records, exc) from exc
    return records


@dataclass
class DocumentResult:
    doc_id: str
    records: list[TranslationRecord]
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def translate_documents(
    docs: Sequence[Document], cfg: RunConfig, index: DatastoreIndex | None, backend: Backend
) -> list[DocumentResult]:
    """Translate documents, up to ``cfg.jobs`` at a time; results keep input order."""

    def one(doc: Document) -> DocumentResult:
        try:
            return DocumentResult(doc.doc_id, translate_document(doc, cfg, index, backend))
        except DocumentFailed as exc:
            log.error("%s", exc)
            return DocumentResult(doc.doc_id, exc.records, str(exc.cause))

    if cfg.jobs <= 1 or len(docs) <= 1:
        return [one(d) for d in docs]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(one, docs))


@dataclass
class ComparisonRow:
    strategy: str
    status: str
    scores: dict[str, float] = field(default_factory=dict)
    records: int = 0
    failed_documents: list[str] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "status": self.status,
            "scores": self.scores,
            "records": self.records,
            "failed_documents": self.failed_documents,
            "error": self.error,
        }


@dataclass
class ComparisonReport:
    lang_pair: str
    rows: list[ComparisonRow]
    run: dict
    records: dict[str, list[TranslationRecord]] = field(default_factory=dict, repr=False)

    @property
    def strategies(self) -> list[str]:
        return [r.strategy for r in self.rows]

    def to_dict(self) -> dict:
        return {"lang_pair": self.lang_pair, "run": self.run, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)

    def metrics(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            for m in r.scores:
                if m not in seen:
                    seen.append(m)
        return seen

    def render_table(self) -> str:
        """Rows are strategies, columns are ``<pair> <metric>``."""
        metrics = self.metrics()
        labels = {"d_bleu": "d-BLEU", "chrf2": "chrF2", "zpt_accuracy": "ZPT"}
        header = [f"{'methods':<12}"] + [f"{self.lang_pair + ' ' + labels.get(m, m):>18}" for m in metrics]
        lines = ["".join(header)]
        for r in self.rows:
            cells = [f"{r.strategy:<12}"]
            for m in metrics:
                v = r.scores.get(m)
                if v is None:
                    cells.append(f"{'-':>18}")
                elif m == "zpt_accuracy":
                    cells.append(f"{100 * v:>18.2f}")
                else:
                    cells.append(f"{v:>18.2f}")
            if r.status != "ok":
                cells.append(f"  [{r.status}]")
            lines.append("".join(cells))
        return "\n".join(lines)

    def records_jsonl(self, include_timing: bool = False) -> str:
        lines = []
        for row in self.rows:
            for rec in self.records.get(row.strategy, []):
                lines.append(rec.to_json(include_timing))
        return "".join(line + "\n" for line in lines)


def run_comparison(
    docs: Sequence[Document],
    strategies: Sequence[StrategyKind | str],
    cfg: RunConfig,
    index: DatastoreIndex | None,
    backend: Backend,
    references: Sequence[Sequence[str]] | None = None,
    annotations: Sequence[ZptAnnotation] | None = None,
) -> ComparisonReport:
    """Run every strategy over every document with the same seed and backend."""
    if not strategies:
        raise ValueError("at least one strategy is required")
    rows: list[ComparisonRow] = []
    all_records: dict[str, list[TranslationRecord]] = {}
    for kind in strategies:
        scfg = cfg.for_strategy(kind)
        name = scfg.strategy.name
        try:
            results = translate_documents(docs, scfg, index, backend)
        except (CapError, ValueError) as exc:
            log.error("strategy %s failed: %s", name, exc)
            rows.append(ComparisonRow(name, "failed", error=str(exc)))
            all_records[name] = []
            continue
        records = [r for res in results for r in res.records]
        all_records[name] = records
        failed = [res.doc_id for res in results if res.failed]
        row = ComparisonRow(name, "failed" if failed else "ok", records=len(records), failed_documents=failed)
        if failed:
            row.error = "; ".join(res.error for res in results if res.error)
        elif references is not None:
            try:
                report: EvalReport = evaluate_records(records, references, cfg.src_lang, cfg.tgt_lang, annotations)
                row.scores = report.scores[cfg.lang_pair].to_dict()
            except CapError as exc:
                row.status, row.error = "failed", str(exc)
        rows.append(row)
    return ComparisonReport(cfg.lang_pair, rows, cfg.to_dict(), all_records)
