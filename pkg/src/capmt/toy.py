"""A deterministic toy model speaking the backend wire protocol.

It is a test double, not a translator: attention follows lexical overlap and
recency, embeddings are hashed bags of words, summaries list salient context
words, and "translation" substitutes words using a lexicon learned from the
prompt's demonstrations. It exists so fixtures can be recorded and the HTTP
protocol exercised without a real model.

Run ``python -m capmt.toy --port 8765`` to serve it over HTTP.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

import numpy as np

from .backend import BackendConfig, PayloadBackend
from .errors import ContextLengthExceeded

EMBED_DIM = 64
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_WORD_RE = re.compile(r"\w+")
_STOPWORDS = frozenset(
    "der die das und ist in zu den von mit sich des auf für nicht ein eine als auch es an er sie wir "
    "the a an and of to in is was for on with as by at it he she they we that this from be has have had".split()
)


def toy_tokens(text: str) -> list[tuple[str, int, int]]:
    """BOS (empty span) followed by word and punctuation tokens."""
    return [("<s>", 0, 0)] + [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def _content(token: str) -> str | None:
    t = token.casefold()
    if len(t) < 3 or t in _STOPWORDS or not _WORD_RE.fullmatch(t):
        return None
    return t


def _softmax_causal(logits: np.ndarray) -> np.ndarray:
    T = logits.shape[0]
    mask = np.tril(np.ones((T, T), dtype=bool))
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def toy_attention(text: str) -> dict:
    toks = toy_tokens(text)
    T = len(toks)
    words = [None] + [_content(t) for t, _, _ in toks[1:]]
    lexical = np.zeros((T, T))
    for i in range(1, T):
        for j in range(1, i):
            a, b = words[i], words[j]
            if a and b:
                if a == b:
                    lexical[i, j] = 3.0
                elif a[:4] == b[:4] and len(a) >= 4:
                    lexical[i, j] = 2.0
    lexical[:, 0] = 1.0
    idx = np.arange(T)
    recency = -0.35 * (idx[:, None] - idx[None, :]).astype(float)
    recency[:, 0] = 0.5
    heads = np.stack([_softmax_causal(lexical), _softmax_causal(recency)])
    return {
        "tokens": [{"text": t, "start": s, "end": e} for t, s, e in toks],
        "causal": True,
        "attention": np.round(heads, 8).tolist(),
    }


def toy_embedding(text: str) -> list[float]:
    vec = np.zeros(EMBED_DIM)
    words = [w.casefold() for w in _WORD_RE.findall(text)]
    for w in words:
        seed = int.from_bytes(hashlib.sha256(w.encode("utf-8")).digest()[:8], "little")
        weight = 0.3 if w in _STOPWORDS else 1.0
        vec += weight * np.random.default_rng(seed).standard_normal(EMBED_DIM)
    if not words:
        vec[0] = 1.0
    return np.round(vec, 7).tolist()


def _summarize(prompt: str) -> str:
    body = prompt.split("\n\n", 1)[1] if "\n\n" in prompt else prompt
    body = body.rsplit("\n\n", 1)[0]
    counts: Counter = Counter()
    first: dict[str, int] = {}
    for pos, m in enumerate(_WORD_RE.finditer(body)):
        w = m.group()
        if _content(w):
            counts[w] += 1
            first.setdefault(w, pos)
    top = sorted(counts, key=lambda w: (-counts[w], first[w]))[:8]
    return " ".join(top) if top else body.strip()[:80]


def _parse_line(line: str) -> tuple[str, str] | None:
    if ": " in line:
        label, text = line.split(": ", 1)
        return label, text
    if line.endswith(":"):
        return line[:-1], ""
    return None


def _translate(prompt: str) -> str:
    lines = prompt.rstrip().split("\n")
    query = _parse_line(lines[-2]) if len(lines) >= 2 else None
    source = query[1] if query else lines[-1]
    lexicon: dict[str, str] = {}
    for src_line, tgt_line in zip(lines, lines[1:]):
        a, b = _parse_line(src_line), _parse_line(tgt_line)
        if not a or not b or not b[1] or a[0] == b[0]:
            continue
        s_toks, t_toks = _TOKEN_RE.findall(a[1]), _TOKEN_RE.findall(b[1])
        if len(s_toks) == len(t_toks):
            for s, t in zip(s_toks, t_toks):
                lexicon.setdefault(s.casefold(), t)
    out = []
    for m in _TOKEN_RE.finditer(source):
        tok = m.group()
        out.append(lexicon.get(tok.casefold(), tok))
    text = re.sub(r" ([.,!?;:])", r"\1", " ".join(out))
    return text[:1].upper() + text[1:]


class ToyBackend(PayloadBackend):
    def __init__(
        self,
        config: BackendConfig | None = None,
        attention_override: Callable[[str], dict | None] | None = None,
    ):
        super().__init__(config or BackendConfig(endpoint="toy://", model_name="toy"))
        self.attention_override = attention_override
        self.calls: Counter = Counter()

    def call(self, route: str, payload: dict) -> dict:
        self.calls[route] += 1
        if route == "generate":
            prompt = payload["prompt"]
            if prompt.startswith("Summarize"):
                text = _summarize(prompt)
            else:
                text = _translate(prompt)
            words = text.split(" ")
            text = " ".join(words[: payload.get("max_new_tokens", len(words))])
            return {"text": text}
        if route == "embed":
            return {"embeddings": [toy_embedding(t) for t in payload["texts"]]}
        if route == "attention":
            text = payload["text"]
            limit = self.config.context_limit
            if limit is not None and len(text) > limit:
                raise ContextLengthExceeded(limit, len(text))
            if self.attention_override is not None:
                resp = self.attention_override(text)
                if resp is not None:
                    return resp
            return toy_attention(text)
        raise ValueError(f"unknown route {route!r}")


def make_handler(backend: PayloadBackend):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            route = self.path.strip("/")
            length = int(self.headers.get("Content-Length", 0))
            try:
                payload = json.loads(self.rfile.read(length).decode("utf-8"))
                body, status = backend.call(route, payload), 200
            except ContextLengthExceeded as exc:
                body, status = {"error": "context_length_exceeded", "limit": exc.limit}, 413
            except (ValueError, KeyError, TypeError) as exc:
                body, status = {"error": str(exc)}, 400
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, fmt, *args):
            pass

    return Handler


def serve(host: str = "127.0.0.1", port: int = 8765, backend: PayloadBackend | None = None) -> ThreadingHTTPServer:
    """Create (but do not start) an HTTP server for ``backend``; call ``serve_forever`` on it."""
    return ThreadingHTTPServer((host, port), make_handler(backend or ToyBackend()))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description="Serve the toy backend over HTTP.")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8765)
    args = ap.parse_args()
    server = serve(args.host, args.port)
    print(f"toy backend on http://{args.host}:{server.server_address[1]}")
    server.serve_forever()
