"""Retrieval baseline: one chunk per table, cosine top-k over embeddings."""

from __future__ import annotations

import os
import re
from collections import Counter
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np

from .catalog import SchemaModel, render_table_block
from .sile import NLQuery

DEFAULT_K = 4

_CAMEL = re.compile(r"[A-Z]+(?![a-z])|[A-Z]?[a-z]+|[0-9]+")


class EmbedderError(Exception):
    pass


def subword_tokens(text: str) -> list[str]:
    """Lower-cased word pieces; identifiers split on underscores and camelCase."""
    out: list[str] = []
    for word in re.findall(r"[A-Za-z0-9]+", text):
        out.extend(p.lower() for p in _CAMEL.findall(word))
    return out


class Embedder(Protocol):
    name: str

    def embed_documents(self, texts: list[str]) -> np.ndarray: ...

    def embed_query(self, text: str) -> np.ndarray: ...


class LexicalEmbedder:
    """Deterministic bag-of-subword-tokens vectors, unit-normalised.

    The vocabulary is fixed by the last ``embed_documents`` call.  Query tokens
    outside it still count towards the query norm, so dot products are exact
    cosine similarities over the full token bags.
    """

    name = "lexical"

    def __init__(self):
        self.vocabulary: dict[str, int] = {}

    def embed_documents(self, texts: list[str]) -> np.ndarray:
        bags = [Counter(subword_tokens(t)) for t in texts]
        vocab = sorted(set().union(*bags)) if bags else []
        self.vocabulary = {tok: i for i, tok in enumerate(vocab)}
        return np.vstack([self._vector(b) for b in bags]) if bags else np.zeros((0, 0))

    def embed_query(self, text: str) -> np.ndarray:
        return self._vector(Counter(subword_tokens(text)))

    def _vector(self, bag: Counter) -> np.ndarray:
        v = np.zeros(len(self.vocabulary))
        norm = float(np.sqrt(sum(c * c for c in bag.values())))
        if norm == 0.0:
            return v
        for tok, c in bag.items():
            i = self.vocabulary.get(tok)
            if i is not None:
                v[i] = c / norm
        return v


class HttpEmbedder:
    """JSON embedding endpoint: POST {"input": [...], "model": ...} -> vectors."""

    name = "http"

    def __init__(self, url: str, model: str | None = None, api_key: str | None = None,
                 client: httpx.Client | None = None, timeout: float = 60.0):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls) -> HttpEmbedder:
        url = os.environ.get("DQ_EMBED_URL")
        if not url:
            raise EmbedderError("DQ_EMBED_URL is not set")
        return cls(url, os.environ.get("DQ_EMBED_MODEL"), os.environ.get("DQ_API_KEY"))

    def _embed(self, texts: list[str]) -> np.ndarray:
        body: dict = {"input": texts}
        if self.model:
            body["model"] = self.model
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.client.post(self.url, json=body, headers=headers)
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise EmbedderError(f"embedding request failed: {exc}") from exc
        if isinstance(data, dict) and "data" in data:
            vectors = [d["embedding"] for d in data["data"]]
        elif isinstance(data, dict) and "embeddings" in data:
            vectors = data["embeddings"]
        else:
            raise EmbedderError("unrecognised embedding response shape")
        arr = np.asarray(vectors, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != len(texts):
            raise EmbedderError(f"expected {len(texts)} vectors, got shape {arr.shape}")
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return arr / norms

    def embed_documents(self, texts: list[str]) -> np.ndarray:
        return self._embed(texts)

    def embed_query(self, text: str) -> np.ndarray:
        return self._embed([text])[0]


@dataclass(frozen=True)
class SchemaChunk:
    table: str
    text: str
    vector: np.ndarray | None = None


@dataclass(frozen=True)
class ChunkIndex:
    chunks: tuple[SchemaChunk, ...]
    embedder: Embedder
    dimension: int

    @property
    def header(self) -> dict:
        return {"embedder": self.embedder.name, "dimension": self.dimension,
                "chunks": len(self.chunks)}


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[tuple[str, float], ...]
    k: int

    @property
    def tables(self) -> list[str]:
        return [t for t, _ in self.ranked]


def index_schema(schema: SchemaModel, embedder: Embedder | None = None) -> ChunkIndex:
    if not schema.tables:
        raise ValueError("cannot index an empty schema")
    embedder = embedder or LexicalEmbedder()
    texts = [render_table_block(t, "full") for t in schema.tables]
    try:
        vectors = embedder.embed_documents(texts)
    except EmbedderError:
        raise
    except Exception as exc:
        raise EmbedderError(str(exc)) from exc
    chunks = tuple(SchemaChunk(t.name, text, vectors[i])
                   for i, (t, text) in enumerate(zip(schema.tables, texts)))
    return ChunkIndex(chunks, embedder, int(vectors.shape[1]))


def retrieve(query: NLQuery | str, index: ChunkIndex, k: int = DEFAULT_K) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    text = query.text if isinstance(query, NLQuery) else query
    q = index.embedder.embed_query(text)
    matrix = np.vstack([c.vector for c in index.chunks])
    scores = matrix @ q
    order = sorted(range(len(index.chunks)),
                   key=lambda i: (-float(scores[i]), index.chunks[i].table))
    top = tuple((index.chunks[i].table, float(scores[i])) for i in order[:k])
    return RetrievalResult(top, k)
