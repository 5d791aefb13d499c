"""Regenerate the recorded fixtures under tests/fixtures.

Run from the repository root::

    python tests/fixtures/make_fixtures.py

Cassettes are recorded from the in-process toy backend; goldens are then
produced by replaying those cassettes. Review the diff before committing.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from capmt import cli
from capmt.backend import BackendConfig, BackendMode, Cassette, RecordReplayBackend
from capmt.corpus import Document, length_ratio_filter, read_parallel_tsv, read_segmented_documents
from capmt.datastore import build_index, save_index
from capmt.pipeline import RunConfig, WindowMode, run_comparison, translate_document
from capmt.prompting import ALL_STRATEGIES, Demonstration, PromptTemplate, render_prompt
from capmt.toy import ToyBackend, toy_tokens

HERE = Path(__file__).parent

ENGINEERED_SENTENCES = [
    "Anna malt Bilder.",
    "Bernd kocht Suppe.",
    "Clara liest Romane.",
    "David baut Möbel.",
    "Emma pflanzt Blumen.",
    "Sie lachen gern.",
]

# per-token attention from the last sentence toward each earlier sentence's tokens:
# spiky rows win under max, flat rows win under avg
ENGINEERED_ROWS = [
    [0.20, 0.005, 0.005, 0.005],
    [0.06, 0.06, 0.06, 0.06],
    [0.15, 0.005, 0.005, 0.005],
    [0.05, 0.05, 0.05, 0.05],
    [0.01, 0.01, 0.01, 0.01],
]
OWN_TOKEN_WEIGHT = 0.02
HEAD_SHIFT = 0.04


def engineered_attention(text: str) -> dict:
    """Two-head causal attention with the designed pattern on the last sentence's rows."""
    toks = toy_tokens(text)
    T = len(toks)
    doc = Document.from_sentences("engineered", ENGINEERED_SENTENCES, "de")
    assert text == doc.text
    starts = [s.start for s in doc.sentences]
    sent_of = [None] + [max(k for k, st in enumerate(starts) if st <= s) for _, s, _ in toks[1:]]
    last = len(ENGINEERED_SENTENCES) - 1
    base = np.zeros((T, T))
    for i in range(T):
        if sent_of[i] != last:
            base[i, : i + 1] = 1.0 / (i + 1)
            continue
        pos_in = {k: 0 for k in range(last)}
        for j in range(1, i + 1):
            s = sent_of[j]
            if s == last:
                base[i, j] = OWN_TOKEN_WEIGHT
            else:
                base[i, j] = ENGINEERED_ROWS[s][pos_in[s]]
                pos_in[s] += 1
        base[i, 0] = 1.0 - base[i, 1 : i + 1].sum()
    # split into two heads whose mean is the designed matrix
    shift = np.zeros((T, T))
    for i in range(T):
        if sent_of[i] == last:
            shift[i, 0] = HEAD_SHIFT
            first_of_s0 = sent_of.index(0)
            shift[i, first_of_s0] = -HEAD_SHIFT
    heads = np.stack([base + shift, base - shift])
    assert heads.min() >= 0
    return {
        "tokens": [{"text": t, "start": s, "end": e} for t, s, e in toks],
        "causal": True,
        "attention": heads.tolist(),
    }


def record(cassette_path: Path, config: BackendConfig, inner: ToyBackend) -> RecordReplayBackend:
    if cassette_path.exists():
        cassette_path.unlink()
    return RecordReplayBackend(config, inner=inner, cassette=Cassette.load(cassette_path))


def main() -> None:
    toy_cfg = BackendConfig(endpoint="toy://", model_name="toy")
    pairs = length_ratio_filter(read_parallel_tsv(HERE / "datastore.de-en.tsv", "de", "en"))
    index = build_index(pairs, ToyBackend(toy_cfg).embed)
    save_index(index, HERE / "datastore.index.jsonl")

    # all six strategies over the three-document fixture
    docs = read_segmented_documents(HERE / "docs.de.txt", "de")
    rec_cfg = BackendConfig(endpoint="toy://", model_name="toy", mode=BackendMode.RECORD)
    backend = record(HERE / "compare.cassette.jsonl", rec_cfg, ToyBackend(toy_cfg))
    run_comparison(docs, list(ALL_STRATEGIES), RunConfig(backend=rec_cfg), index, backend)

    # engineered attention document, CAP under max, avg and the fixed window
    eng_doc = Document.from_sentences("engineered", ENGINEERED_SENTENCES, "de")
    (HERE / "engineered.de.txt").write_text("\n".join(ENGINEERED_SENTENCES) + "\n", encoding="utf-8")
    payload = engineered_attention(eng_doc.text)
    (HERE / "engineered_attention.json").write_text(
        json.dumps({"sentences": ENGINEERED_SENTENCES, "text": eng_doc.text, **payload}) + "\n", encoding="utf-8"
    )
    override = lambda text: payload if text == eng_doc.text else None  # noqa: E731
    backend = record(HERE / "engineered.cassette.jsonl", rec_cfg, ToyBackend(toy_cfg, attention_override=override))
    for mode in ("max", "avg"):
        translate_document(eng_doc, RunConfig(attention_mode=mode, backend=rec_cfg), index, backend)
    translate_document(eng_doc, RunConfig(window_mode=WindowMode.FIXED, ablation=True, backend=rec_cfg), index, backend)

    # embedding batch invariance: one batch of 64 and two batches of 32
    texts = [f"Satz Nummer {i} über Daten und Netzwerke." for i in range(64)]
    backend = record(HERE / "embed.cassette.jsonl", rec_cfg, ToyBackend(toy_cfg))
    backend.config = BackendConfig(endpoint="toy://", model_name="toy", mode=BackendMode.RECORD, embed_batch_size=64)
    backend.embed(texts)
    backend.config = BackendConfig(endpoint="toy://", model_name="toy", mode=BackendMode.RECORD, embed_batch_size=32)
    backend.embed(texts)

    # prompt goldens
    demos = [Demonstration.from_entry(e, "summary") for e in index.entries[:3]]
    for k in (0, 1, 3):
        prompt = render_prompt(PromptTemplate(), demos[:k], docs[0].sentences[1].text, ("de", "en"))
        (HERE / f"prompt_k{k}.txt").write_text(prompt, encoding="utf-8")

    # CLI golden: translate --strategy cap under replay, run with relative paths
    os.chdir(HERE)
    code = cli.main(
        [
            "translate", "--doc", "docs.de.txt", "--index", "datastore.index.jsonl",
            "--strategy", "cap", "--out", "translate_cap.golden.jsonl", "--backend-mode", "replay",
            "--cassette", "compare.cassette.jsonl", "--model", "toy", "--backend-url", "toy://",
        ],
        environ={},
    )
    assert code == 0, code


if __name__ == "__main__":
    main()
