"""Command-line entry point.

Settings resolve in this order: explicit flags, then the CAP_BACKEND_URL /
CAP_BACKEND_MODE environment variables (backend only), then the ``--config``
file (a flat YAML or JSON mapping whose keys are flag names), then built-in
defaults.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .attention import AggregationMode
from .backend import ENV_MODE, ENV_URL, BackendConfig, BackendMode, make_backend
from .corpus import (
    Document,
    length_ratio_filter,
    normalize_punctuation,
    read_parallel_tsv,
    read_segmented_documents,
)
from .datastore import build_index, load_index, save_index
from .errors import CapError
from .evaluation import evaluate_records, read_zpt_annotations
from .pipeline import (
    AttentionPass,
    RunConfig,
    TranslationRecord,
    WindowMode,
    attention_input,
    run_comparison,
    translate_documents,
    window_from_attention,
)
from .prompting import ALL_STRATEGIES, PromptTemplate, Strategy

log = logging.getLogger("capmt")

DEFAULTS: dict[str, Any] = {
    "backend_url": "http://127.0.0.1:8000",
    "backend_mode": "live",
    "cassette": None,
    "model": "default",
    "timeout": 60.0,
    "retries": 2,
    "max_in_flight": 8,
    "src_lang": "de",
    "tgt_lang": "en",
    "seed": 0,
    "strategy": "cap",
    "strategies": ",".join(s.value for s in ALL_STRATEGIES),
    "k": 3,
    "n_context": 3,
    "attention_mode": "max",
    "window": "dynamic",
    "attention_pass": "prefix",
    "bidirectional": False,
    "ablation": False,
    "prepend_context": False,
    "template": None,
    "jobs": 1,
    "with_timing": False,
    "max_ratio": 1.5,
    "no_filter": False,
    "normalize": False,
    "doc_format": "lines",
    "doc_index": 0,
    "zpt": None,
    "out": None,
    "out_dir": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend and run settings")
    g.add_argument("--config", help="flat YAML/JSON file of flag values")
    g.add_argument("--backend-url", help=f"backend endpoint, or toy:// for the in-process toy model (env {ENV_URL})")
    g.add_argument("--backend-mode", choices=[m.value for m in BackendMode], help=f"live, record or replay (env {ENV_MODE})")
    g.add_argument("--cassette", help="record/replay cassette (JSON lines)")
    g.add_argument("--model", help="model name sent to the backend")
    g.add_argument("--timeout", type=float)
    g.add_argument("--retries", type=int)
    g.add_argument("--max-in-flight", type=int)
    g.add_argument("--src-lang")
    g.add_argument("--tgt-lang")
    g.add_argument("--seed", type=int)
    g.add_argument("-v", "--verbose", action="store_true")


def _run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("strategy")
    g.add_argument("--k", type=int, help="demonstrations per prompt (default 3)")
    g.add_argument("--n-context", type=int, help="dynamic context size N (default 3)")
    g.add_argument("--attention-mode", choices=[m.value for m in AggregationMode])
    g.add_argument("--window", choices=[m.value for m in WindowMode])
    g.add_argument("--attention-pass", choices=[m.value for m in AttentionPass])
    g.add_argument("--bidirectional", action="store_const", const=True)
    g.add_argument("--ablation", action="store_const", const=True, help="allow ablation-only settings")
    g.add_argument("--prepend-context", action="store_const", const=True)
    g.add_argument("--template", help="prompt template file (three sections separated by '---' lines)")
    g.add_argument("--jobs", type=int, help="documents translated in parallel")
    g.add_argument("--with-timing", action="store_const", const=True, help="include per-stage timings in records")
    g.add_argument("--doc-format", choices=["lines", "raw"], help="lines: one sentence per line, blank line between documents")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cap-mt", description="Context-aware prompting for document-level MT.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("build-datastore", help="embed a parallel TSV corpus into an index")
    _common(p)
    p.add_argument("--pairs", required=True, help="UTF-8 TSV, src<TAB>tgt per line")
    p.add_argument("--out", required=True)
    p.add_argument("--max-ratio", type=float)
    p.add_argument("--no-filter", action="store_const", const=True, help="skip the length-ratio filter")
    p.add_argument("--normalize", action="store_const", const=True, help="normalize punctuation first")

    p = sub.add_parser("translate", help="translate documents with one strategy")
    _common(p)
    _run_flags(p)
    p.add_argument("--doc", required=True)
    p.add_argument("--index")
    p.add_argument("--strategy", choices=[s.value for s in ALL_STRATEGIES] + ["ours"])
    p.add_argument("--out", required=True, help="records JSONL")

    p = sub.add_parser("compare", help="run several strategies and score them")
    _common(p)
    _run_flags(p)
    p.add_argument("--doc", required=True)
    p.add_argument("--index")
    p.add_argument("--strategies", help="comma-separated list (default: all six)")
    p.add_argument("--refs", help="reference documents, same layout as --doc")
    p.add_argument("--zpt", help="ZPT annotations JSONL")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evaluate", help="score translation records against references")
    _common(p)
    p.add_argument("--records", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--zpt")
    p.add_argument("--out", help="write the JSON report here as well")

    p = sub.add_parser("attention-dump", help="dump head-averaged attention and sentence scores")
    _common(p)
    _run_flags(p)
    p.add_argument("--doc", required=True)
    p.add_argument("--doc-index", type=int)
    p.add_argument("--sentence", type=int, required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_config(path: str | None, parser_keys: set[str]) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a flat mapping")
    out = {}
    for key, value in data.items():
        k = str(key).replace("-", "_")
        if k not in parser_keys or isinstance(value, (dict, list)):
            raise UsageError(f"config {path}: unknown or non-scalar key {key!r}")
        out[k] = value
    return out


class Settings:
    """Flag values with config-file and default fallbacks."""

    def __init__(self, args: argparse.Namespace, config: dict, environ: dict[str, str]):
        self.args = args
        self.config = config
        self.environ = environ

    def __getattr__(self, name: str):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        if name == "backend_url" and self.environ.get(ENV_URL):
            return self.environ[ENV_URL]
        if name == "backend_mode" and self.environ.get(ENV_MODE):
            return self.environ[ENV_MODE].lower()
        if name in self.config:
            return self.config[name]
        return DEFAULTS.get(name)


def backend_config(s: Settings) -> BackendConfig:
    return BackendConfig(
        endpoint=s.backend_url,
        model_name=s.model,
        timeout=float(s.timeout),
        retries=int(s.retries),
        mode=BackendMode(s.backend_mode),
        cassette=s.cassette,
        max_in_flight=int(s.max_in_flight),
    )


def run_config(s: Settings, strategy: str | None = None) -> RunConfig:
    template = PromptTemplate.from_file(s.template) if s.template else PromptTemplate()
    try:
        return _build_run_config(s, strategy, template)
    except ValueError as exc:
        raise UsageError(f"cap-mt: error: {exc}") from exc


def _build_run_config(s: Settings, strategy: str | None, template: PromptTemplate) -> RunConfig:
    return RunConfig(
        strategy=Strategy.parse(strategy or s.strategy),
        n_context=int(s.n_context),
        k_demos=int(s.k),
        attention_mode=AggregationMode(s.attention_mode),
        window_mode=WindowMode(s.window),
        attention_pass=AttentionPass(s.attention_pass),
        bidirectional=bool(s.bidirectional),
        ablation=bool(s.ablation),
        prepend_context=bool(s.prepend_context),
        seed=int(s.seed),
        src_lang=s.src_lang,
        tgt_lang=s.tgt_lang,
        template=template,
        backend=backend_config(s),
        jobs=int(s.jobs),
    )


def _announce(run: dict) -> None:
    print("run: " + json.dumps(run, sort_keys=True), file=sys.stderr)


def _read_docs(path: str, lang: str, fmt: str) -> list[Document]:
    if fmt == "raw":
        text = Path(path).read_text(encoding="utf-8")
        return [Document.from_text(Path(path).stem, text, lang)]
    return read_segmented_documents(path, lang)


def _read_refs(path: str) -> list[list[str]]:
    blocks: list[list[str]] = [[]]
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            blocks[-1].append(line.strip())
        elif blocks[-1]:
            blocks.append([])
    return [b for b in blocks if b]


def read_records(path: str) -> tuple[dict | None, list[TranslationRecord]]:
    run, records = None, []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        d = json.loads(line)
        if "run" in d and "doc_id" not in d:
            run = d["run"]
            continue
        records.append(TranslationRecord.from_dict(d))
    return run, records


def _write_jsonl(path: str | Path, header: dict, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"run": header}, sort_keys=True, ensure_ascii=False) + "\n")
        for line in lines:
            fh.write(line + "\n")


def cmd_build_datastore(s: Settings) -> int:
    pairs = read_parallel_tsv(s.pairs, s.src_lang, s.tgt_lang)
    if s.normalize:
        from .corpus import ParallelPair

        pairs = [ParallelPair(normalize_punctuation(p.src), normalize_punctuation(p.tgt), p.src_lang, p.tgt_lang) for p in pairs]
    n_read = len(pairs)
    if not s.no_filter:
        pairs = length_ratio_filter(pairs, float(s.max_ratio))
    bcfg = backend_config(s)
    _announce({"command": "build-datastore", "backend": bcfg.to_dict(), "max_ratio": None if s.no_filter else s.max_ratio})
    backend = make_backend(bcfg)
    index = build_index(pairs, backend.embed)
    save_index(index, s.out)
    print(f"indexed {len(index)} of {n_read} pairs (dim {index.dim}) -> {s.out}", file=sys.stderr)
    return 0


def cmd_translate(s: Settings) -> int:
    cfg = run_config(s)
    run = cfg.to_dict()
    _announce(run)
    docs = _read_docs(s.doc, cfg.src_lang, s.doc_format)
    index = load_index(s.index) if s.index else None
    backend = make_backend(cfg.backend)
    results = translate_documents(docs, cfg, index, backend)
    lines = [r.to_json(bool(s.with_timing)) for res in results for r in res.records]
    _write_jsonl(s.out, run, lines)
    failed = [res.doc_id for res in results if res.failed]
    if failed:
        print(f"failed documents: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_compare(s: Settings) -> int:
    cfg = run_config(s)
    strategies = [Strategy.parse(x).kind for x in str(s.strategies).split(",") if x.strip()]
    docs = _read_docs(s.doc, cfg.src_lang, s.doc_format)
    index = load_index(s.index) if s.index else None
    refs = _read_refs(s.refs) if s.refs else None
    annotations = read_zpt_annotations(s.zpt) if s.zpt else None
    backend = make_backend(cfg.backend)
    report = run_comparison(docs, strategies, cfg, index, backend, refs, annotations)
    report.run["strategies"] = [k.value for k in strategies]
    _announce(report.run)
    out = Path(s.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "records.jsonl", report.run, report.records_jsonl(bool(s.with_timing)).splitlines())
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    table = report.render_table()
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0 if all(r.status == "ok" for r in report.rows) else 2


def cmd_evaluate(s: Settings) -> int:
    run, records = read_records(s.records)
    refs = _read_refs(s.refs)
    annotations = read_zpt_annotations(s.zpt) if s.zpt else None
    src_lang = (run or {}).get("src_lang", s.src_lang)
    tgt_lang = (run or {}).get("tgt_lang", s.tgt_lang)
    report = evaluate_records(records, refs, src_lang, tgt_lang, annotations, config=run or {})
    payload = json.dumps(report.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)
    if s.out:
        Path(s.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    print(report.render_table(), file=sys.stderr)
    return 0


def cmd_attention_dump(s: Settings) -> int:
    cfg = run_config(s, strategy="cap")
    run = cfg.to_dict()
    _announce(run)
    docs = _read_docs(s.doc, cfg.src_lang, s.doc_format)
    doc = docs[int(s.doc_index)]
    i = int(s.sentence)
    if not 0 <= i < len(doc):
        raise UsageError(f"--sentence {i} out of range for a {len(doc)}-sentence document")
    backend = make_backend(cfg.backend)
    text, upto = attention_input(doc, i, cfg)
    response = backend.attention(text)
    window, matrix, smap, _ = window_from_attention(response, doc, i, cfg, upto)
    from .attention import sentence_attention

    full = sentence_attention(matrix, smap, cfg.attention_mode, causal=response.tensor.causal)
    dump = {
        "tokens": [t.text for t in response.tokens],
        "token_sentence": [int(x) if x >= 0 else None for x in smap.token_to_sentence],
        "head_avg": matrix.tolist(),
        "sentence_scores": full.to_nested(),
        "current": i,
        "context_members": list(window.members),
        "run": run,
    }
    Path(s.out).write_text(json.dumps(dump, ensure_ascii=False) + "\n", encoding="utf-8")
    return 0


COMMANDS = {
    "build-datastore": cmd_build_datastore,
    "translate": cmd_translate,
    "compare": cmd_compare,
    "evaluate": cmd_evaluate,
    "attention-dump": cmd_attention_dump,
}


def main(argv: Sequence[str] | None = None, environ: dict[str, str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        keys = set(vars(args)) | set(DEFAULTS)
        settings = Settings(args, _load_config(args.config, keys - {"config", "command"}), dict(os.environ if environ is None else environ))
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (CapError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"cap-mt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
