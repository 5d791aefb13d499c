"""Context-aware prompting for document-level machine translation.

Attention-selected dynamic context, summary-based demonstration retrieval,
few-shot prompt assembly and document-level metrics, with the usual
prompt-selection baselines for comparison.
"""

__version__ = "0.1.0"

from .attention import (
    AggregationMode,
    AttentionTensor,
    ContextWindow,
    SentenceAttentionMatrix,
    SentenceMap,
    average_heads,
    fixed_context,
    select_context,
    sentence_attention,
    sentence_sentence_score,
    token_sentence_score,
)
from .backend import BackendConfig, BackendMode, GenerationRequest, make_backend
from .corpus import Document, ParallelPair, Sentence, length_ratio_filter, normalize_punctuation, segment_document
from .datastore import DatastoreIndex, build_index, load_index, retrieve_bm25, retrieve_similar, sample_random, save_index
from .evaluation import chrf2, d_bleu, zpt_accuracy
from .pipeline import RunConfig, TranslationRecord, run_comparison, translate_document
from .prompting import Demonstration, PromptTemplate, Strategy, StrategyKind, render_prompt, select_demonstrations

__all__ = [
    "AggregationMode",
    "AttentionTensor",
    "BackendConfig",
    "BackendMode",
    "ContextWindow",
    "DatastoreIndex",
    "Demonstration",
    "Document",
    "GenerationRequest",
    "ParallelPair",
    "PromptTemplate",
    "RunConfig",
    "Sentence",
    "SentenceAttentionMatrix",
    "SentenceMap",
    "Strategy",
    "StrategyKind",
    "TranslationRecord",
    "average_heads",
    "build_index",
    "chrf2",
    "d_bleu",
    "fixed_context",
    "length_ratio_filter",
    "load_index",
    "make_backend",
    "normalize_punctuation",
    "render_prompt",
    "retrieve_bm25",
    "retrieve_similar",
    "run_comparison",
    "sample_random",
    "save_index",
    "segment_document",
    "select_context",
    "select_demonstrations",
    "sentence_attention",
    "sentence_sentence_score",
    "token_sentence_score",
    "translate_document",
    "zpt_accuracy",
]
