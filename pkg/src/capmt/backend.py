"""Model access: generation, embedding and final-layer attention.

Every backend speaks the same JSON payloads on three routes:

``/generate``
    request ``{model, prompt, max_new_tokens, temperature, stop}``,
    response ``{text}``.
``/embed``
    request ``{model, texts}``, response ``{embeddings: [[float]]}``.
``/attention``
    request ``{model, text}``, response
    ``{tokens: [{text, start, end}], causal: bool, attention: [[[float]]]}``
    where ``attention`` is the final layer, shaped heads x tokens x tokens.
    Special tokens use an empty span (``start == end``). A server that
    refuses an over-long input answers HTTP 413 with
    ``{error: "context_length_exceeded", limit: int}``.

:class:`HttpBackend` sends these over HTTP, :class:`RecordReplayBackend`
records them to (or replays them from) a JSON-lines cassette.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .attention import AttentionTensor
from .errors import (
    BackendError,
    BackendProtocolError,
    BackendTimeout,
    ContextLengthExceeded,
    InvalidTensor,
    ReplayMiss,
)

log = logging.getLogger(__name__)

ROUTES = ("generate", "embed", "attention")
ENV_URL = "CAP_BACKEND_URL"
ENV_MODE = "CAP_BACKEND_MODE"


class BackendMode(str, enum.Enum):
    LIVE = "live"
    RECORD = "record"
    REPLAY = "replay"


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_new_tokens: int = 256
    temperature: float = 0.0
    stop: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.stop is not None:
            object.__setattr__(self, "stop", tuple(self.stop))


@dataclass(frozen=True)
class TokenSpan:
    text: str
    start: int
    end: int

    @property
    def char_range(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class AttentionResponse:
    tokens: tuple[TokenSpan, ...]
    tensor: AttentionTensor

    def __post_init__(self):
        if len(self.tokens) != self.tensor.num_tokens:
            raise InvalidTensor(f"{len(self.tokens)} tokens but tensor covers {self.tensor.num_tokens}")
        prev_end = 0
        for tok in self.tokens:
            if tok.start == tok.end:
                continue
            if tok.start < prev_end or tok.end < tok.start:
                raise InvalidTensor(f"token span {tok.char_range} overlaps or is out of order")
            prev_end = tok.end


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://127.0.0.1:8000"
    model_name: str = "default"
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 0.5
    mode: BackendMode = BackendMode.LIVE
    cassette: str | None = None
    context_limit: int | None = None
    max_in_flight: int = 8
    embed_batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "mode", BackendMode(self.mode))

    def with_env(self, environ: dict[str, str] | None = None) -> "BackendConfig":
        env = os.environ if environ is None else environ
        updates: dict[str, Any] = {}
        if env.get(ENV_URL):
            updates["endpoint"] = env[ENV_URL]
        if env.get(ENV_MODE):
            updates["mode"] = BackendMode(env[ENV_MODE].lower())
        return replace(self, **updates) if updates else self

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "model_name": self.model_name,
            "mode": self.mode.value,
            "cassette": self.cassette,
        }


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> str: ...

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...

    def attention(self, text: str) -> AttentionResponse: ...


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def request_hash(route: str, payload: dict) -> str:
    return hashlib.sha256(canonical_json({"route": route, "request": payload}).encode("utf-8")).hexdigest()


def strip_stop(text: str, stop: Sequence[str] | None) -> str:
    """Cut ``text`` at the earliest occurrence of any stop sequence."""
    if not stop:
        return text
    cut = len(text)
    for s in stop:
        if s:
            pos = text.find(s)
            if pos != -1:
                cut = min(cut, pos)
    return text[:cut]


def parse_attention(payload: dict, text: str) -> AttentionResponse:
    try:
        tokens = tuple(TokenSpan(str(t["text"]), int(t["start"]), int(t["end"])) for t in payload["tokens"])
        weights = np.asarray(payload["attention"], dtype=np.float64)
        causal = bool(payload.get("causal", True))
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendProtocolError(f"malformed attention response: {exc}") from exc
    for tok in tokens:
        if not 0 <= tok.start <= tok.end <= len(text):
            raise InvalidTensor(f"token span {tok.char_range} lies outside the input")
    return AttentionResponse(tokens, AttentionTensor(weights, causal))


class PayloadBackend:
    """Implements the typed capabilities on top of a raw ``call(route, payload)``."""

    def __init__(self, config: BackendConfig):
        self.config = config

    def call(self, route: str, payload: dict) -> dict:
        raise NotImplementedError

    def generate(self, request: GenerationRequest) -> str:
        payload = {
            "model": self.config.model_name,
            "prompt": request.prompt,
            "max_new_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "stop": list(request.stop) if request.stop else None,
        }
        resp = self.call("generate", payload)
        text = resp.get("text")
        if not isinstance(text, str):
            raise BackendProtocolError("generate response has no text field")
        return strip_stop(text, request.stop)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        if any(not t for t in texts):
            raise ValueError("cannot embed an empty text")
        vectors: list[np.ndarray] = []
        size = max(self.config.embed_batch_size, 1)
        for start in range(0, len(texts), size):
            batch = texts[start:start + size]
            resp = self.call("embed", {"model": self.config.model_name, "texts": batch})
            try:
                out = [np.asarray(v, dtype=np.float64) for v in resp["embeddings"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendProtocolError(f"malformed embed response: {exc}") from exc
            if len(out) != len(batch):
                raise BackendProtocolError(f"embed returned {len(out)} vectors for {len(batch)} texts")
            vectors.extend(out)
        shapes = {v.shape for v in vectors}
        if len(shapes) > 1 or any(len(s) != 1 or s[0] == 0 for s in shapes):
            raise BackendProtocolError(f"inconsistent embedding shapes {sorted(shapes)}")
        return vectors

    def attention(self, text: str) -> AttentionResponse:
        if not text:
            raise ValueError("attention input must be non-empty")
        limit = self.config.context_limit
        if limit is not None and len(text) > limit:
            raise ContextLengthExceeded(limit, len(text))
        resp = self.call("attention", {"model": self.config.model_name, "text": text})
        return parse_attention(resp, text)


class HttpBackend(PayloadBackend):
    """JSON-over-HTTP client. Thread safe; in-flight requests are capped."""

    requests_sent = 0  # process-wide count of HTTP requests, for hermeticity checks
    _count_lock = threading.Lock()

    def __init__(self, config: BackendConfig):
        super().__init__(config)
        if config.mode is BackendMode.REPLAY:
            raise BackendError("HttpBackend cannot be used in replay mode")
        import httpx

        self._httpx = httpx
        self._client = httpx.Client(base_url=config.endpoint.rstrip("/"), timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(max(config.max_in_flight, 1))

    def close(self) -> None:
        self._client.close()

    def call(self, route: str, payload: dict) -> dict:
        httpx = self._httpx
        attempt = 0
        while True:
            try:
                with self._slots:
                    with HttpBackend._count_lock:
                        HttpBackend.requests_sent += 1
                    resp = self._client.post(f"/{route}", json=payload)
            except httpx.TimeoutException as exc:
                err: BackendError = BackendTimeout(f"{route} timed out after {self.config.timeout}s")
                err.__cause__ = exc
            except httpx.HTTPError as exc:
                err = BackendProtocolError(f"{route} transport error: {exc}")
                err.__cause__ = exc
            else:
                if resp.status_code == 413:
                    body = _json_or_empty(resp)
                    raise ContextLengthExceeded(int(body.get("limit", -1)), len(payload.get("text", "")))
                if resp.status_code < 500:
                    if resp.status_code != 200:
                        raise BackendProtocolError(f"{route} returned HTTP {resp.status_code}: {resp.text[:200]}")
                    body = _json_or_empty(resp)
                    if not body:
                        raise BackendProtocolError(f"{route} returned a non-JSON body")
                    return body
                err = BackendProtocolError(f"{route} returned HTTP {resp.status_code}")
            if attempt >= self.config.retries:
                raise err
            time.sleep(self.config.backoff * (2 ** attempt))
            attempt += 1
            log.warning("retrying %s (attempt %d): %s", route, attempt + 1, err)


def _json_or_empty(resp) -> dict:
    try:
        body = resp.json()
    except ValueError:
        return {}
    return body if isinstance(body, dict) else {}


@dataclass
class Cassette:
    """JSON-lines store of ``{hash, route, request, response}`` records."""

    path: Path | None
    records: dict[str, dict] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def load(cls, path: str | Path | None) -> "Cassette":
        cas = cls(Path(path) if path is not None else None)
        if cas.path is not None and cas.path.exists():
            for lineno, line in enumerate(cas.path.read_text(encoding="utf-8").splitlines(), start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    cas.records[rec["hash"]] = rec
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise BackendProtocolError(f"{cas.path}:{lineno}: corrupt cassette record") from exc
        return cas

    def get(self, key: str) -> dict | None:
        return self.records.get(key)

    def put(self, route: str, request: dict, response: dict) -> None:
        key = request_hash(route, request)
        rec = {"hash": key, "route": route, "request": request, "response": response}
        with self._lock:
            if key in self.records:
                return
            self.records[key] = rec
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(canonical_json(rec) + "\n")


class RecordReplayBackend(PayloadBackend):
    """REPLAY answers only from the cassette; RECORD forwards to ``inner`` and stores the answer."""

    def __init__(self, config: BackendConfig, inner: PayloadBackend | None = None, cassette: Cassette | None = None):
        super().__init__(config)
        if config.mode is BackendMode.RECORD and inner is None:
            raise BackendError("record mode needs an inner backend")
        self.inner = inner if config.mode is BackendMode.RECORD else None
        self.cassette = cassette if cassette is not None else Cassette.load(config.cassette)
        self.hits = 0

    def call(self, route: str, payload: dict) -> dict:
        key = request_hash(route, payload)
        rec = self.cassette.get(key)
        if rec is not None:
            self.hits += 1
            return rec["response"]
        if self.inner is None:
            raise ReplayMiss(key, route)
        resp = self.inner.call(route, payload)
        self.cassette.put(route, payload, resp)
        return resp


def make_backend(config: BackendConfig) -> PayloadBackend:
    """Build the backend for ``config``. An endpoint of ``toy://`` selects the in-process toy model."""
    if config.mode is BackendMode.REPLAY:
        if not config.cassette:
            raise BackendError("replay mode needs a cassette path")
        return RecordReplayBackend(config)
    if config.endpoint.startswith("toy://"):
        from .toy import ToyBackend

        live: PayloadBackend = ToyBackend(config)
    else:
        live = HttpBackend(config)
    if config.mode is BackendMode.RECORD:
        if not config.cassette:
            raise BackendError("record mode needs a cassette path")
        return RecordReplayBackend(config, inner=live)
    return live
