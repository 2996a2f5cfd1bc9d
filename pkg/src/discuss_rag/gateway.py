"""Chat-completion and embedding access.

Two backends share one duck-typed surface (``complete``, ``embed``,
``embedder_id``, ``identity``, ``thread_safe``):

* :class:`OpenAICompatBackend` talks to any OpenAI-compatible HTTP API.
* :class:`ScriptedBackend` replays fixture completions and derives embeddings
  from a seeded token-hashing function, so tests never touch the network.

Scripted runs must be single-threaded unless the backend is driven purely by a
stateless ``responder`` (then ``thread_safe`` is True).
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

from .errors import (
    BackendRefusal,
    DimensionMismatch,
    FixtureExhausted,
    TransportError,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "DISCUSS_RAG_API_KEY"
ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "error")

DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_BACKOFF = 0.25
DEFAULT_EMBED_DIM = 64
DEFAULT_EMBED_SEED = 42


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    model_id: str = ""  # empty: backend default

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("ChatRequest needs at least one message")
        if self.messages[0].role != "system":
            raise ValueError("first message must have role 'system'")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"invalid temperature {self.temperature!r}")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def simple(cls, system: str, user: str, **kwargs) -> "ChatRequest":
        return cls((Message("system", system), Message("user", user)), **kwargs)

    def followup(self, assistant: str, user: str) -> "ChatRequest":
        """Same request extended by an assistant turn and a corrective user turn."""
        msgs = self.messages + (Message("assistant", assistant), Message("user", user))
        return ChatRequest(msgs, self.temperature, self.max_tokens, self.model_id)

    @property
    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatCompletion:
    content: str
    finish_reason: str = "stop"
    usage: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"unknown finish_reason {self.finish_reason!r}")
        if self.finish_reason == "stop" and not self.content:
            raise ValueError("a 'stop' completion must carry content")
        if any(u < 0 for u in self.usage):
            raise ValueError("usage counts must be non-negative")


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def request_fingerprint(request: ChatRequest) -> str:
    """Stable hash of ordered roles and whitespace-normalized contents."""
    h = hashlib.sha256()
    for m in request.messages:
        h.update(m.role.encode())
        h.update(b"\x1f")
        h.update(normalize_ws(m.content).encode("utf-8"))
        h.update(b"\x1e")
    return h.hexdigest()[:16]


def _check_texts(texts: Sequence[str]) -> None:
    if not texts:
        raise ValueError("embed() needs at least one text")
    for i, t in enumerate(texts):
        if not t.strip():
            raise ValueError(f"text #{i} is empty after trimming")


def _check_vectors(vectors: list[np.ndarray], n_texts: int) -> list[np.ndarray]:
    if len(vectors) != n_texts:
        raise DimensionMismatch(f"expected {n_texts} vectors, got {len(vectors)}")
    dims = {v.shape[0] for v in vectors}
    if len(dims) > 1:
        raise DimensionMismatch(f"provider returned mixed dimensions {sorted(dims)}")
    for v in vectors:
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite values")
    return vectors


# --------------------------------------------------------------------------
# deterministic embedder

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class HashingEmbedder:
    """Seeded bag-of-tokens embedder.

    Every token maps to a fixed pseudo-random Gaussian vector (seeded from a
    hash of ``seed`` and the token); a text embeds to the normalized sum of its
    token vectors. Texts sharing vocabulary therefore land close together,
    which is enough lexical signal for retrieval tests without a model
    download. Text with no word tokens hashes as a single token.
    """

    def __init__(self, dim: int = DEFAULT_EMBED_DIM, seed: int = DEFAULT_EMBED_SEED):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._token_vector = functools.lru_cache(maxsize=65536)(self._make_token_vector)

    @property
    def embedder_id(self) -> str:
        return f"hashing-d{self.dim}-s{self.seed}"

    def _make_token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim)

    def embed_one(self, text: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(text.lower()) or [text.strip()]
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token_vector(tok)
        norm = np.linalg.norm(acc)
        if norm > 0:
            acc /= norm
        return acc.astype(np.float32)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        _check_texts(texts)
        return [self.embed_one(t) for t in texts]


# --------------------------------------------------------------------------
# scripted backend


@dataclass
class FixtureEntry:
    """One scripted completion.

    ``fingerprint`` is a request fingerprint or ``"*"`` (any request);
    ``match`` optionally restricts the entry to requests whose text contains
    it. ``finish_reason == "error"`` makes the call raise TransportError with
    ``content`` as the message (fault injection).
    """

    content: str
    fingerprint: str = "*"
    finish_reason: str = "stop"
    match: str | None = None

    def matches(self, fp: str, request: ChatRequest) -> bool:
        if self.fingerprint not in ("*", fp):
            return False
        return self.match is None or self.match in request.text

    def to_record(self) -> dict:
        rec = {"fingerprint": self.fingerprint, "content": self.content,
               "finish_reason": self.finish_reason}
        if self.match is not None:
            rec["match"] = self.match
        return rec


def load_fixture(path: str | os.PathLike) -> list[FixtureEntry]:
    """Read a JSON-lines fixture file (fields: fingerprint, content, finish_reason[, match])."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(FixtureEntry(
                    content=rec["content"],
                    fingerprint=rec.get("fingerprint", "*"),
                    finish_reason=rec.get("finish_reason", "stop"),
                    match=rec.get("match"),
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad fixture record ({exc})") from exc
    return entries


def save_fixture(entries: Iterable[FixtureEntry], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_record(), ensure_ascii=False) + "\n")


Responder = Callable[[ChatRequest], "str | ChatCompletion"]


class ScriptedBackend:
    """Deterministic backend replaying fixtures.

    Lookup order per request: the first unconsumed fixture entry (file order)
    that matches, then ``responder`` if given; otherwise FixtureExhausted.
    Every request is appended to ``requests`` for later inspection.
    """

    def __init__(
        self,
        entries: Iterable[FixtureEntry] = (),
        responder: Responder | None = None,
        dim: int = DEFAULT_EMBED_DIM,
        seed: int = DEFAULT_EMBED_SEED,
        name: str = "scripted",
    ):
        self.entries = list(entries)
        self._consumed = [False] * len(self.entries)
        self.responder = responder
        self.embedder = HashingEmbedder(dim, seed)
        self.name = name
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path, **kwargs) -> "ScriptedBackend":
        return cls(load_fixture(path), **kwargs)

    @property
    def thread_safe(self) -> bool:
        return not self.entries and self.responder is not None

    @property
    def dim(self) -> int:
        return self.embedder.dim

    @property
    def embedder_id(self) -> str:
        return self.embedder.embedder_id

    @property
    def identity(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(json.dumps(e.to_record(), sort_keys=True).encode())
        return f"{self.name}:{h.hexdigest()[:16]}:{self.embedder_id}"

    @property
    def remaining(self) -> int:
        return self._consumed.count(False)

    def complete(self, request: ChatRequest) -> ChatCompletion:
        fp = request_fingerprint(request)
        with self._lock:
            self.requests.append(request)
            entry = None
            for i, e in enumerate(self.entries):
                if not self._consumed[i] and e.matches(fp, request):
                    self._consumed[i] = True
                    entry = e
                    break
        if entry is None:
            if self.responder is None:
                raise FixtureExhausted(f"no fixture entry for request {fp}")
            out = self.responder(request)
            if isinstance(out, ChatCompletion):
                return out
            entry = FixtureEntry(content=out)
        if entry.finish_reason == "error":
            raise TransportError(entry.content or "scripted transport failure")
        usage = (len(request.text.split()), len(entry.content.split()))
        return ChatCompletion(entry.content, entry.finish_reason, usage)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return _check_vectors(self.embedder.embed(texts), len(texts))


# --------------------------------------------------------------------------
# live backend

_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class OpenAICompatBackend:
    """Blocking client for ``{base_url}/chat/completions`` and ``{base_url}/embeddings``."""

    thread_safe = True

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        model_id: str = "gpt-3.5-turbo-0125",
        embedding_model: str = "text-embedding-3-small",
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        backoff: float = DEFAULT_BACKOFF,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.model_id = model_id
        self.embedding_model = embedding_model
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self.attempts = 0
        self._dim: int | None = None

    @property
    def identity(self) -> str:
        return f"openai-compat:{self.base_url}:{self.model_id}"

    @property
    def embedder_id(self) -> str:
        return f"openai-compat:{self.embedding_model}"

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.base_url}{path}"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self.attempts += 1
            try:
                resp = self._client.post(url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last = exc
                logger.warning("POST %s attempt %d failed: %s", path, attempt + 1, exc)
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                logger.warning("POST %s attempt %d got HTTP %d", path, attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise BackendRefusal(f"HTTP {resp.status_code}: {resp.text[:500]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendRefusal(f"non-JSON response from {url}") from exc
        raise TransportError(f"POST {url} failed after {self.max_attempts} attempts: {last}")

    def complete(self, request: ChatRequest) -> ChatCompletion:
        payload = {
            "model": request.model_id or self.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        body = self._post("/chat/completions", payload)
        try:
            choice = body["choices"][0]
            content = choice["message"].get("content") or ""
            reason = choice.get("finish_reason") or "stop"
        except (KeyError, IndexError, TypeError, AttributeError) as exc:
            raise BackendRefusal(f"malformed completion body: {str(body)[:200]}") from exc
        if reason not in FINISH_REASONS:
            reason = "error"
        if reason == "stop" and not content:
            raise BackendRefusal("backend returned an empty completion")
        usage = body.get("usage") or {}
        return ChatCompletion(
            content, reason,
            (int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
        )

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        _check_texts(texts)
        body = self._post("/embeddings", {"model": self.embedding_model, "input": list(texts)})
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            vectors = [np.asarray(d["embedding"], dtype=np.float32) for d in data]
        except (KeyError, TypeError) as exc:
            raise BackendRefusal("malformed embeddings body") from exc
        vectors = _check_vectors(vectors, len(texts))
        if self._dim is None:
            self._dim = vectors[0].shape[0]
        elif vectors[0].shape[0] != self._dim:
            raise DimensionMismatch(f"dimension changed from {self._dim} to {vectors[0].shape[0]}")
        return vectors


@dataclass
class CallCounter:
    """Wraps a backend and counts chat completions (one per ``complete`` call)."""

    inner: object
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def complete(self, request: ChatRequest) -> ChatCompletion:
        with self._lock:
            self.calls += 1
        return self.inner.complete(request)

    def embed(self, texts):
        return self.inner.embed(texts)

    def __getattr__(self, name):
        return getattr(self.inner, name)


def backend_from_env(base_url: str | None = None, **kwargs) -> OpenAICompatBackend:
    url = base_url or os.environ.get("DISCUSS_RAG_BASE_URL") or "https://api.openai.com/v1"
    return OpenAICompatBackend(url, **kwargs)
