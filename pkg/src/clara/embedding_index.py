"""Corpus chunking, embedders, and an exact cosine top-k index with a binary on-disk format."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .errors import (
    DimensionMismatch,
    EmbedderUnavailable,
    EmptyCorpus,
    EmptyIndex,
    IndexFormatError,
)

logger = logging.getLogger(__name__)

SOURCES = ("pubmed", "textbook", "wikipedia", "other")
DEFAULT_SNIPPET_LENGTH = 200
HASH_DIMENSION = 256
INDEX_MAGIC = b"CLIX1"
INDEX_FORMAT_VERSION = 1
_HEADER = struct.Struct("<5sII")


def chunk_document(doc_text: str, snippet_length: int = DEFAULT_SNIPPET_LENGTH, overlap: int = 0) -> list[str]:
    """Split on whitespace into windows of ``snippet_length`` tokens.

    Consecutive windows share ``overlap`` tokens. The last window is the first
    one that reaches the end of the text, so it may be short.
    """
    if not (snippet_length > overlap >= 0):
        raise ValueError("need snippet_length > overlap >= 0")
    tokens = doc_text.split()
    stride = snippet_length - overlap
    chunks = []
    start = 0
    while start < len(tokens):
        chunks.append(" ".join(tokens[start : start + snippet_length]))
        if start + snippet_length >= len(tokens):
            break
        start += stride
    return chunks


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.sqrt(np.dot(vec, vec)))
    if norm == 0.0:
        return np.zeros_like(vec)
    return vec / norm


def cosine_sim(u, v) -> float:
    """Cosine similarity; 0.0 when either vector is all zeros."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"cannot compare vectors of shape {u.shape} and {v.shape}")
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    sim = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, sim))


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]: ...


_TOKEN_SPLIT = re.compile(r"[\W_]+")


class HashingEmbedder:
    """Deterministic bag-of-tokens embedder for offline work.

    Lowercase, split on non-alphanumerics, hash every token (BLAKE2b-64) into
    ``dimension`` buckets, count, L2-normalize. Empty text gives the zero vector.
    """

    name = "hashing"

    def __init__(self, dimension: int = HASH_DIMENSION):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for tok in _TOKEN_SPLIT.split(text.lower()):
            if tok:
                vec[self.bucket(tok)] += 1.0
        return l2_normalize(vec)

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]

    def describe(self) -> dict[str, Any]:
        return {"kind": self.name, "dimension": self.dimension}


class HttpEmbedder:
    """Remote encoder: POST ``{"texts": [...]}`` -> ``{"vectors": [[...], ...]}``."""

    name = "http"

    def __init__(
        self,
        url: str,
        dimension: int,
        timeout: float = 30.0,
        retries: int = 2,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.dimension = dimension
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(0.25 * attempt)
            try:
                resp = self._client.post(self.url, json={"texts": list(texts)})
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
                if len(vectors) != len(texts):
                    raise ValueError("vector count does not match text count")
                out = [l2_normalize(np.asarray(v, dtype=np.float64)) for v in vectors]
                for v in out:
                    if v.shape != (self.dimension,):
                        raise DimensionMismatch(f"expected dimension {self.dimension}, got {v.shape}")
                return out
            except DimensionMismatch:
                raise
            except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
                last = exc
        raise EmbedderUnavailable(f"{self.url}: {last}") from last

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def describe(self) -> dict[str, Any]:
        return {"kind": self.name, "dimension": self.dimension, "url": self.url}


@dataclass(frozen=True, eq=False)
class Snippet:
    snippet_id: str
    doc_id: str
    source: str
    text: str
    vector: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        vec = l2_normalize(np.asarray(self.vector, dtype=np.float64))
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    def metadata(self) -> dict[str, str]:
        return {
            "snippet_id": self.snippet_id,
            "doc_id": self.doc_id,
            "source": self.source,
            "text": self.text,
        }


def snippet_id_for(doc_id: str, ordinal: int) -> str:
    return f"{doc_id}#{ordinal:05d}"


class VectorIndex:
    """Exact brute-force cosine index. Immutable once built."""

    def __init__(self, snippets: Iterable[Snippet], dimension: int, metadata: Mapping[str, Any] | None = None):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.snippets: tuple[Snippet, ...] = tuple(snippets)
        self.dimension = dimension
        self.metadata = dict(metadata or {})
        ids = [s.snippet_id for s in self.snippets]
        if len(set(ids)) != len(ids):
            raise ValueError("snippet ids must be unique")
        for s in self.snippets:
            if s.vector.shape != (dimension,):
                raise DimensionMismatch(
                    f"snippet {s.snippet_id} has shape {s.vector.shape}, index dimension is {dimension}"
                )
        if self.snippets:
            self.matrix = np.vstack([s.vector for s in self.snippets])
        else:
            self.matrix = np.zeros((0, dimension))
        self.matrix.setflags(write=False)
        # position of each snippet in ascending-id order, used as the tie-breaker
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))

    def __len__(self) -> int:
        return len(self.snippets)

    def cosine_scores(self, query_vector) -> np.ndarray:
        """Cosine of ``query_vector`` against every snippet, in index order."""
        q = np.asarray(query_vector, dtype=np.float64)
        if q.shape != (self.dimension,):
            raise DimensionMismatch(f"query has shape {q.shape}, index dimension is {self.dimension}")
        q = l2_normalize(q)
        # Row-wise reduction: identical rows always produce bit-identical scores.
        scores = (self.matrix * q).sum(axis=1)
        return np.clip(scores, -1.0, 1.0)

    def rank(self, scores: np.ndarray, k: int) -> list[int]:
        """Positions of the ``k`` best scores, descending, ties by ascending snippet_id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.snippets:
            raise EmptyIndex("index holds no snippets")
        order = np.lexsort((self._id_rank, -np.asarray(scores)))
        return [int(i) for i in order[:k]]

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``path`` (binary vectors) and ``path + '.json'`` (snippet metadata)."""
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(INDEX_MAGIC, self.dimension, len(self.snippets)))
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
        sidecar = sidecar_path(path)
        meta = {
            "format_version": INDEX_FORMAT_VERSION,
            "dimension": self.dimension,
            "count": len(self.snippets),
            "metadata": self.metadata,
            "snippets": [s.metadata() for s in self.snippets],
        }
        sidecar.write_text(json.dumps(meta, ensure_ascii=False, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path, sidecar

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise IndexFormatError(f"{path}: truncated header")
        magic, dim, count = _HEADER.unpack_from(raw)
        if magic != INDEX_MAGIC:
            raise IndexFormatError(f"{path}: bad magic {magic!r}")
        body = raw[_HEADER.size :]
        if len(body) != dim * count * 8:
            raise IndexFormatError(f"{path}: expected {count} records of dimension {dim}")
        matrix = np.frombuffer(body, dtype="<f8").reshape(count, dim)
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        if meta.get("format_version") != INDEX_FORMAT_VERSION:
            raise IndexFormatError(f"{path}: unsupported sidecar version {meta.get('format_version')}")
        if meta["count"] != count or meta["dimension"] != dim:
            raise IndexFormatError(f"{path}: sidecar does not match binary header")
        snippets = [
            Snippet(m["snippet_id"], m["doc_id"], m["source"], m["text"], matrix[i])
            for i, m in enumerate(meta["snippets"])
        ]
        return cls(snippets, dim, meta.get("metadata"))


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def top_k(index: VectorIndex, query_vector, k: int) -> list[tuple[Snippet, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndex("index holds no snippets")
    scores = index.cosine_scores(query_vector)
    return [(index.snippets[i], float(scores[i])) for i in index.rank(scores, k)]


# -- ingestion ----------------------------------------------------------------

@dataclass(frozen=True)
class CorpusDocument:
    doc_id: str
    source: str
    title: str
    text: str


def load_corpus_jsonl(path: str | Path) -> list[CorpusDocument]:
    docs = []
    text = Path(path).read_bytes().decode("utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            source = str(obj.get("source", "other")).lower()
            docs.append(CorpusDocument(str(obj["doc_id"]), source, str(obj.get("title", "")), str(obj["text"])))
        except (ValueError, KeyError, AttributeError) as exc:
            raise ValueError(f"{path}: line {lineno}: malformed corpus record ({exc})") from None
        if source not in SOURCES:
            raise ValueError(f"{path}: line {lineno}: unknown source {source!r}")
    return docs


def build_index(
    docs: Sequence[CorpusDocument],
    embedder,
    snippet_length: int = DEFAULT_SNIPPET_LENGTH,
    overlap: int = 0,
) -> VectorIndex:
    if not docs:
        raise EmptyCorpus("corpus has no documents")
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise ValueError("doc_id values must be unique")
    pending: list[tuple[str, str, str, str]] = []
    for doc in docs:
        for ordinal, chunk in enumerate(chunk_document(doc.text, snippet_length, overlap)):
            pending.append((snippet_id_for(doc.doc_id, ordinal), doc.doc_id, doc.source, chunk))
    vectors = embedder.embed_many([p[3] for p in pending]) if pending else []
    snippets = [Snippet(sid, did, src, txt, vec) for (sid, did, src, txt), vec in zip(pending, vectors)]
    describe = getattr(embedder, "describe", None)
    meta = {
        "documents": len(docs),
        "snippet_length": snippet_length,
        "overlap": overlap,
        "embedder": describe() if describe else {"kind": type(embedder).__name__},
    }
    return VectorIndex(snippets, embedder.dimension, meta)
