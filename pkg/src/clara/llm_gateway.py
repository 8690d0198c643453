"""Chat-completion port: scripted and HTTP backends, call accounting, JSON extraction."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping, Protocol, Sequence

import httpx

from .errors import BackendUnavailable, ParseExhausted, ScriptMiss

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
API_KEY_ENV = "CLARA_LLM_API_KEY"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not isinstance(self.content, str):
            raise TypeError("content must be text")
        if self.role != "assistant" and not self.content.strip():
            raise ValueError(f"{self.role} message must not be empty")

    def to_json(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class CompletionParams:
    model_name: str = "scripted"
    temperature: float = 0.0
    max_output_tokens: int = 1024
    seed_note: str | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


def fingerprint(messages: Sequence[ChatMessage]) -> str:
    """Stable 64-bit prompt hash, as 16 lowercase hex digits.

    The hashed payload is the UTF-8 encoding of ``"[role]\\ncontent\\n"`` for
    each message, concatenated in order, hashed with BLAKE2b (8-byte digest).
    """
    h = hashlib.blake2b(digest_size=8)
    for m in messages:
        h.update(f"[{m.role}]\n{m.content}\n".encode("utf-8"))
    return h.hexdigest()


class ChatBackend(Protocol):
    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str: ...


class ScriptedBackend:
    """Replays canned responses keyed by prompt fingerprint.

    In strict mode an unknown fingerprint raises :class:`ScriptMiss`; otherwise
    ``default`` is returned.
    """

    def __init__(self, script: Mapping[str, str], strict: bool = True, default: str = ""):
        self.script = dict(script)
        self.strict = strict
        self.default = default

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str:
        fp = fingerprint(messages)
        if fp in self.script:
            return self.script[fp]
        if self.strict:
            raise ScriptMiss(fp)
        return self.default

    @classmethod
    def from_file(cls, path, strict: bool = True) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        script = data.get("responses", data) if isinstance(data, dict) else None
        if not isinstance(script, dict):
            raise ValueError(f"{path}: expected a JSON object of fingerprint -> response")
        return cls(script, strict=strict)


class CallableBackend:
    """Wraps a plain function ``fn(messages) -> str``. Used to author fixtures."""

    def __init__(self, fn: Callable[[Sequence[ChatMessage]], str]):
        self.fn = fn

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str:
        return self.fn(messages)


class RecordingBackend:
    """Delegates to ``inner`` and keeps every fingerprint -> response pair."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.recorded: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str:
        text = self.inner.complete(messages, params)
        with self._lock:
            self.recorded[fingerprint(messages)] = text
        return text


class HttpChatBackend:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.retries = retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> str:
        body = {
            "model": params.model_name,
            "messages": [m.to_json() for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt and self.backoff:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
                logger.warning("chat completion attempt %d failed: %s", attempt + 1, exc)
                last = exc
        raise BackendUnavailable(f"{self.url}: {last}") from last


# Receives the reply text, or None when the backend raised.
CallObserver = Callable[[Sequence[ChatMessage], "str | None"], None]


class LLMGateway:
    """Front door for every LLM call; counts calls atomically."""

    def __init__(self, backend: ChatBackend, params: CompletionParams | None = None):
        self.backend = backend
        self.params = params or CompletionParams()
        self._count = 0
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return self._count

    def complete(
        self,
        messages: Sequence[ChatMessage],
        params: CompletionParams | None = None,
        observer: CallObserver | None = None,
    ) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        with self._lock:
            self._count += 1
        try:
            text = self.backend.complete(list(messages), params or self.params)
        except Exception:
            if observer is not None:
                observer(messages, None)
            raise
        if observer is not None:
            observer(messages, text)
        return text

    def complete_structured(
        self,
        messages: Sequence[ChatMessage],
        params: CompletionParams | None = None,
        expected_keys: set[str] | frozenset[str] = frozenset(),
        max_retries: int = 2,
        validate: Callable[[dict], Any] | None = None,
        observer: CallObserver | None = None,
    ) -> dict:
        """Return the first JSON object in the reply that has ``expected_keys``.

        ``validate`` may reject a candidate by raising ``ValueError``/``TypeError``/
        ``KeyError``; its return value, if not None, replaces the object. Malformed
        replies are re-asked with a corrective turn up to ``max_retries`` times, then
        :class:`ParseExhausted` is raised.
        """
        if max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        convo = list(messages)
        text = ""
        for attempt in range(max_retries + 1):
            text = self.complete(convo, params, observer)
            found = parse_structured(text, expected_keys, validate)
            if found is not None:
                return found
            convo = convo + [
                ChatMessage("assistant", text),
                ChatMessage("user", corrective_instruction(expected_keys)),
            ]
        raise ParseExhausted(max_retries + 1, text)


def corrective_instruction(expected_keys) -> str:
    keys = ", ".join(sorted(expected_keys)) or "(any)"
    return (
        "Your previous reply could not be parsed. Reply again with a single JSON "
        f"object containing the keys: {keys}. Do not add any other text."
    )


def iter_json_objects(text: str) -> Iterator[dict]:
    """Yield JSON objects embedded in free text, ordered by opening-brace position.

    Each ``{`` starts a candidate that ends at its balancing ``}`` (braces inside
    string literals are skipped). Candidates that fail to parse are dropped and
    scanning resumes at the next ``{``, so an object nested in garbage is still found.
    """
    if not isinstance(text, str):
        return
    n = len(text)
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = False
        escaped = False
        end = -1
        for j in range(start, n):
            ch = text[j]
            if in_str:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    end = j
                    break
        if end != -1:
            try:
                obj = json.loads(text[start : end + 1])
            except (ValueError, RecursionError):
                obj = None
            if isinstance(obj, dict):
                yield obj
        start = text.find("{", start + 1)


def parse_structured(
    text: str, expected_keys=frozenset(), validate: Callable[[dict], Any] | None = None
) -> dict | None:
    for obj in iter_json_objects(text):
        if not all(k in obj for k in expected_keys):
            continue
        if validate is not None:
            try:
                replaced = validate(obj)
            except (ValueError, TypeError, KeyError):
                continue
            if replaced is not None:
                obj = replaced
        return obj
    return None
