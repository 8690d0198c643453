"""Web search port: a scripted mock and a Tavily-compatible HTTP adapter."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import httpx

from .embedding_index import Snippet
from .errors import SearchUnavailable

logger = logging.getLogger(__name__)

SEARCH_KEY_ENV = "CLARA_SEARCH_API_KEY"


@dataclass(frozen=True)
class SearchResult:
    title: str
    url: str
    snippet_text: str
    rank: int

    def __post_init__(self) -> None:
        if not self.snippet_text.strip():
            raise ValueError("snippet_text must be non-empty")
        if self.rank < 1:
            raise ValueError("rank starts at 1")


class SearchPort(Protocol):
    def search(self, query: str, k: int) -> list[SearchResult]: ...


def _check_args(query: str, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not query.strip():
        raise ValueError("query must be non-empty")


def _ranked(rows: Sequence[Mapping[str, str]], k: int) -> list[SearchResult]:
    out: list[SearchResult] = []
    for row in rows:
        text = (row.get("content") or row.get("snippet_text") or "").strip()
        if not text:
            continue
        out.append(SearchResult(row.get("title", ""), row.get("url", ""), text, len(out) + 1))
        if len(out) == k:
            break
    return out


class ScriptedSearch:
    """Canned results keyed by a substring of the query (case-insensitive).

    When several keys occur in the query the longest one wins, then the
    alphabetically first.
    """

    def __init__(self, canned: Mapping[str, Sequence[Mapping[str, str]]], unavailable: bool = False):
        self.canned = {key.casefold(): list(rows) for key, rows in canned.items()}
        self.unavailable = unavailable

    def search(self, query: str, k: int) -> list[SearchResult]:
        _check_args(query, k)
        if self.unavailable:
            raise SearchUnavailable("scripted search is configured as unavailable")
        folded = query.casefold()
        hits = sorted((key for key in self.canned if key in folded), key=lambda key: (-len(key), key))
        if not hits:
            return []
        return _ranked(self.canned[hits[0]], k)

    @classmethod
    def from_file(cls, path) -> "ScriptedSearch":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


class TavilySearch:
    """POST ``{"api_key", "query", "max_results"}``; reads ``results[].{title,url,content}``."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout: float = 20.0,
        retries: int = 1,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(SEARCH_KEY_ENV, "")
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)

    def search(self, query: str, k: int) -> list[SearchResult]:
        _check_args(query, k)
        body = {"api_key": self.api_key, "query": query, "max_results": k}
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=body)
                resp.raise_for_status()
                rows = resp.json().get("results", [])
                return _ranked([r for r in rows if isinstance(r, dict)], k)
            except (httpx.HTTPError, ValueError, AttributeError) as exc:
                last = exc
        raise SearchUnavailable(f"{self.endpoint}: {last}") from last


def results_to_snippets(results: Sequence[SearchResult], embedder) -> list[Snippet]:
    """Turn search hits into ``source='other'`` snippets embedded like corpus text."""
    out = []
    for r in results:
        digest = hashlib.blake2b(f"{r.url}\n{r.title}\n{r.snippet_text}".encode("utf-8"), digest_size=6).hexdigest()
        out.append(Snippet(f"web:{digest}", r.url or f"web-result-{r.rank}", "other", r.snippet_text, embedder.embed(r.snippet_text)))
    return out
