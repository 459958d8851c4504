"""Chat and embedding backends, an exact-scan vector index, and a scripted mock chat."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field

import httpx
import numpy as np

logger = logging.getLogger(__name__)

ENV_URL = "PROVSENTINEL_LLM_URL"
ENV_MODEL = "PROVSENTINEL_LLM_MODEL"
ENV_KEY = "PROVSENTINEL_LLM_KEY"
ENV_EMBED_MODEL = "PROVSENTINEL_EMBED_MODEL"

DEFAULT_URL = "https://api.openai.com/v1"
DEFAULT_MODEL = "gpt-4o-mini"

_RETRY_STATUS = {429, 500, 502, 503, 504}


class LLMError(RuntimeError):
    stage = None

    def with_stage(self, stage):
        self.stage = stage
        return self

    def __str__(self):
        base = super().__str__()
        return f"[{self.stage}] {base}" if self.stage else base


class TransportError(LLMError):
    pass


class ApiError(LLMError):
    def __init__(self, status, message):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status
        self.message = message


class MockScriptError(AssertionError):
    """A prompt reached the mock backend that no script rule covers."""


# -- chat ------------------------------------------------------------------------


class _HttpBackend:
    def __init__(self, url, model, api_key=None, timeout=60.0, max_attempts=3, backoff=0.5, transport=None, sleep=time.sleep):
        self.url = url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep
        self.call_log = []
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _post(self, path, payload):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for attempt in range(1, self.max_attempts + 1):
            self.call_log.append({"path": path, "attempt": attempt})
            try:
                resp = self._client.post(f"{self.url}{path}", json=payload, headers=headers)
            except httpx.TransportError as exc:
                last = TransportError(f"{type(exc).__name__}: {exc}")
            else:
                if resp.is_success:
                    return resp.json()
                err = ApiError(resp.status_code, _error_message(resp))
                if resp.status_code not in _RETRY_STATUS:
                    raise err
                last = err
            if attempt < self.max_attempts:
                self.sleep(self.backoff * 2 ** (attempt - 1))
        if isinstance(last, TransportError):
            raise TransportError(f"{last} (gave up after {self.max_attempts} attempts)")
        raise last


def _error_message(resp):
    try:
        body = resp.json()
        if isinstance(body, dict) and isinstance(body.get("error"), dict):
            return body["error"].get("message", resp.text)
        return json.dumps(body)
    except ValueError:
        return resp.text


class OpenAIChatBackend(_HttpBackend):
    """OpenAI-compatible ``/chat/completions`` client, temperature pinned to 0 by default."""

    def __init__(self, url=DEFAULT_URL, model=DEFAULT_MODEL, api_key=None, temperature=0.0, **kwargs):
        super().__init__(url, model, api_key, **kwargs)
        self.temperature = temperature

    def chat(self, system_instructions, messages) -> str:
        if not messages:
            raise ValueError("chat needs at least one message")
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "system", "content": system_instructions}, *messages],
        }
        data = self._post("/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise ApiError(200, f"unexpected response shape: {str(data)[:200]}") from None


class OpenAIEmbeddingBackend(_HttpBackend):
    def __init__(self, url=DEFAULT_URL, model="text-embedding-3-large", api_key=None, **kwargs):
        super().__init__(url, model, api_key, **kwargs)

    def embed(self, texts) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise ValueError("embed needs at least one text")
        data = self._post("/embeddings", {"model": self.model, "input": texts})
        rows = sorted(data["data"], key=lambda d: d["index"])
        return np.asarray([r["embedding"] for r in rows], dtype=float)


@dataclass
class MockRule:
    pattern: str
    responses: list
    calls: int = 0

    def next_response(self):
        item = self.responses[min(self.calls, len(self.responses) - 1)]
        self.calls += 1
        return item


class MockChat:
    """Scripted chat backend: first rule whose regex matches the last user message answers.

    A rule's response may be a string, a list of strings consumed in order
    (the last one repeats), or a callable ``(system, messages) -> str``.
    In strings, ``{{last_user}}`` is replaced by the last user message.
    """

    def __init__(self, rules=None):
        self.rules = []
        self.call_log = []
        for pattern, response in rules or []:
            self.add(pattern, response)

    def add(self, pattern, response):
        responses = response if isinstance(response, list) else [response]
        self.rules.append(MockRule(pattern, responses))
        return self

    @classmethod
    def from_json(cls, path) -> "MockChat":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        rules = data["rules"] if isinstance(data, dict) else data
        return cls([(r["pattern"], r["response"]) for r in rules])

    def chat(self, system_instructions, messages) -> str:
        if not messages:
            raise ValueError("chat needs at least one message")
        last_user = next((m["content"] for m in reversed(messages) if m["role"] == "user"), "")
        for rule in self.rules:
            if re.search(rule.pattern, last_user, flags=re.DOTALL):
                item = rule.next_response()
                text = item(system_instructions, messages) if callable(item) else item.replace("{{last_user}}", last_user)
                self.call_log.append(
                    {
                        "system": system_instructions,
                        "messages": [dict(m) for m in messages],
                        "pattern": rule.pattern,
                        "response": text,
                    }
                )
                return text
        self.call_log.append({"system": system_instructions, "messages": [dict(m) for m in messages], "pattern": None})
        raise MockScriptError(f"no mock rule matches prompt: {last_user[:200]!r}")


# -- embeddings ------------------------------------------------------------------

_TOKEN = re.compile(r"[\w./:\\-]+")


class HashEmbedding:
    """Deterministic feature-hashing embedding over token unigrams and bigrams."""

    def __init__(self, dim=512, eps=1e-8):
        self.dim = dim
        self.eps = eps

    def _bucket(self, token):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        return value % self.dim, 1.0 if (value >> 63) & 1 else -1.0

    def embed_one(self, text) -> np.ndarray:
        tokens = _TOKEN.findall(text.lower())
        grams = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
        vec = np.zeros(self.dim)
        for g in grams:
            k, sign = self._bucket(g)
            vec[k] += sign
        return _unit(vec, self.eps)

    def embed(self, texts) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise ValueError("embed needs at least one text")
        return np.vstack([self.embed_one(t) for t in texts])


def _unit(vec, eps=1e-8):
    norm = np.linalg.norm(vec)
    if norm < eps:
        # reserved direction for empty / all-cancelled inputs
        return np.full(vec.shape, 1.0 / np.sqrt(vec.size))
    return vec / norm


# -- vector index -----------------------------------------------------------------


@dataclass
class Chunk:
    chunk_id: str
    text: str
    doc_id: str
    score: float = 0.0


@dataclass
class VectorIndex:
    embedder: object
    ids: list = field(default_factory=list)
    texts: list = field(default_factory=list)
    doc_ids: list = field(default_factory=list)
    vectors: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def add(self, chunk_ids, texts, doc_id):
        chunk_ids, texts = list(chunk_ids), list(texts)
        if not texts:
            return
        vecs = self.embedder.embed(texts)
        dim = vecs.shape[1]
        if self.vectors and self.vectors[0].shape[0] != dim:
            raise ValueError(f"embedding dimension {dim} != index dimension {self.vectors[0].shape[0]}")
        for cid, text, vec in zip(chunk_ids, texts, vecs):
            self.ids.append(cid)
            self.texts.append(text)
            self.doc_ids.append(doc_id)
            self.vectors.append(_unit(np.asarray(vec, dtype=float)))

    def add_document(self, doc):
        texts = doc.chunk_texts()
        self.add([f"{doc.subgraph_id}#{k:04d}" for k in range(len(texts))], texts, doc.subgraph_id)

    def retrieve(self, query_text, k=8, doc_id=None) -> list:
        """Top-``k`` chunks by cosine similarity, ties broken by ascending chunk id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        rows = [i for i in range(len(self.ids)) if doc_id is None or self.doc_ids[i] == doc_id]
        if not rows:
            return []
        q = _unit(np.asarray(self.embedder.embed([query_text])[0], dtype=float))
        # round away float noise so mathematically equal cosines tie-break by id
        sims = np.round(np.vstack([self.vectors[i] for i in rows]) @ q, 12)
        order = sorted(range(len(rows)), key=lambda j: (-sims[j], self.ids[rows[j]]))[:k]
        return [Chunk(self.ids[rows[j]], self.texts[rows[j]], self.doc_ids[rows[j]], float(sims[j])) for j in order]


# -- configuration -----------------------------------------------------------------


@dataclass
class LLMSettings:
    url: str = DEFAULT_URL
    model: str = DEFAULT_MODEL
    api_key: str | None = None
    embed_model: str | None = None  # None -> offline hash embedding
    timeout: float = 60.0
    mock_script: str | None = None  # path to a JSON mock fixture

    @classmethod
    def from_env(cls, base: "LLMSettings | None" = None, environ=None) -> "LLMSettings":
        env = os.environ if environ is None else environ
        s = base or cls()
        return cls(
            url=env.get(ENV_URL, s.url),
            model=env.get(ENV_MODEL, s.model),
            api_key=env.get(ENV_KEY, s.api_key),
            embed_model=env.get(ENV_EMBED_MODEL, s.embed_model),
            timeout=s.timeout,
            mock_script=s.mock_script,
        )


@dataclass
class Backends:
    chat: object
    embedder: object
    judge: object = None

    def __post_init__(self):
        if self.judge is None:
            self.judge = self.chat

    @classmethod
    def from_settings(cls, settings: LLMSettings) -> "Backends":
        if settings.mock_script:
            chat = MockChat.from_json(settings.mock_script)
        else:
            chat = OpenAIChatBackend(settings.url, settings.model, settings.api_key, timeout=settings.timeout)
        if settings.embed_model:
            embedder = OpenAIEmbeddingBackend(settings.url, settings.embed_model, settings.api_key, timeout=settings.timeout)
        else:
            embedder = HashEmbedding()
        return cls(chat, embedder)

