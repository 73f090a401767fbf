"""Tokenization, TF-IDF, Okapi BM25, cosine similarity, and embedding providers.

TF-IDF uses the smoothed formulation ``tf * (ln((1+N)/(1+df)) + 1)`` with L2
normalization per document.  BM25 is the Okapi form with ``k1=1.5, b=0.75``
and ``idf = ln(1 + (N - df + 0.5)/(df + 0.5))``.

Dense embeddings come from an :class:`EmbeddingProvider`: either the bundled
deterministic hash provider (no model weights) or an HTTP service speaking
``POST {"texts": [...]} -> {"vectors": [[...], ...], "dimension": d}``.
"""

from __future__ import annotations

import hashlib
import math
import os
import re
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
import requests

BM25_K1 = 1.5
BM25_B = 0.75

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_CAMEL_RE = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|[0-9]+")


class EmbeddingError(RuntimeError):
    """An embedding provider failed; the message names the provider."""


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric tokens; underscores and punctuation split."""
    return _TOKEN_RE.findall(text.lower())


def tokenize_path(path: str) -> list[str]:
    """Tokenize a dotted element path, splitting camelCase segments.

    ``"Observation.valueQuantity.unit"`` -> ``["observation", "value",
    "quantity", "unit"]``.
    """
    tokens: list[str] = []
    for segment in path.split("."):
        tokens.extend(m.lower() for m in _CAMEL_RE.findall(segment))
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    """Term ids (dense in [0, |V|)), document frequencies, and corpus size."""

    term_ids: dict[str, int]
    df: dict[str, int]
    n_docs: int


@dataclass(frozen=True)
class SparseVector:
    """Sorted (term id, weight) pairs backed by parallel numpy arrays."""

    ids: np.ndarray
    weights: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.weights, self.weights)))


@dataclass(frozen=True)
class DenseVector:
    """Fixed-dimension embedding with its provider tag."""

    values: np.ndarray
    provider: str


@dataclass(frozen=True)
class Ranking:
    """One model's full ordering of a corpus: (doc_id, score, rank) from rank 1."""

    model: str
    entries: tuple[tuple[str, float, int], ...]

    def ids(self) -> list[str]:
        return [doc_id for doc_id, _, _ in self.entries]

    def rank_of(self, doc_id: str) -> int | None:
        for did, _, rank in self.entries:
            if did == doc_id:
                return rank
        return None


def _sparse_from_weights(weights: dict[int, float]) -> SparseVector:
    ids = np.array(sorted(weights), dtype=np.int64)
    vals = np.array([weights[i] for i in ids], dtype=np.float64)
    return SparseVector(ids, vals)


@dataclass(frozen=True)
class TfidfIndex:
    vocabulary: Vocabulary
    vectors: dict[str, SparseVector]

    def vectorize(self, tokens: list[str]) -> SparseVector:
        """TF-IDF vector of a query under the corpus vocabulary (unknown terms drop)."""
        return _tfidf_vector(Counter(tokens), self.vocabulary)


def _tfidf_vector(counts: Counter, vocab: Vocabulary) -> SparseVector:
    weights: dict[int, float] = {}
    n = vocab.n_docs
    for term, tf in counts.items():
        tid = vocab.term_ids.get(term)
        if tid is None:
            continue
        idf = math.log((1 + n) / (1 + vocab.df[term])) + 1.0
        weights[tid] = tf * idf
    vec = _sparse_from_weights(weights)
    norm = vec.norm()
    if norm > 0:
        return SparseVector(vec.ids, vec.weights / norm)
    return vec


def build_tfidf(docs: list) -> TfidfIndex:
    """Build the smoothed, L2-normalized TF-IDF index over canonical documents."""
    token_lists = {d.doc_id: tokenize(d.text) for d in docs}
    if all(not toks for toks in token_lists.values()):
        raise ValueError("cannot build TF-IDF index: all documents are empty")
    df: Counter = Counter()
    for toks in token_lists.values():
        df.update(set(toks))
    term_ids = {t: i for i, t in enumerate(sorted(df))}
    vocab = Vocabulary(term_ids=term_ids, df=dict(df), n_docs=len(docs))
    vectors = {doc_id: _tfidf_vector(Counter(toks), vocab) for doc_id, toks in token_lists.items()}
    return TfidfIndex(vocabulary=vocab, vectors=vectors)


@dataclass(frozen=True)
class Bm25Index:
    vocabulary: Vocabulary
    term_freqs: dict[str, Counter]
    doc_lens: dict[str, int]
    avgdl: float


def build_bm25(docs: list) -> Bm25Index:
    token_lists = {d.doc_id: tokenize(d.text) for d in docs}
    if all(not toks for toks in token_lists.values()):
        raise ValueError("cannot build BM25 index: all documents are empty")
    df: Counter = Counter()
    for toks in token_lists.values():
        df.update(set(toks))
    term_ids = {t: i for i, t in enumerate(sorted(df))}
    doc_lens = {doc_id: len(toks) for doc_id, toks in token_lists.items()}
    return Bm25Index(
        vocabulary=Vocabulary(term_ids=term_ids, df=dict(df), n_docs=len(docs)),
        term_freqs={doc_id: Counter(toks) for doc_id, toks in token_lists.items()},
        doc_lens=doc_lens,
        avgdl=sum(doc_lens.values()) / len(doc_lens),
    )


def bm25_score(index: Bm25Index, query_tokens: list[str], doc_id: str) -> float:
    """Okapi BM25 score of one document; repeated query tokens accumulate."""
    if doc_id not in index.term_freqs:
        raise ValueError(f"unknown doc id: {doc_id!r}")
    tf = index.term_freqs[doc_id]
    dl = index.doc_lens[doc_id]
    n = index.vocabulary.n_docs
    norm = BM25_K1 * (1 - BM25_B + BM25_B * dl / index.avgdl)
    score = 0.0
    for term in query_tokens:
        f = tf.get(term, 0)
        if f == 0:
            continue
        df = index.vocabulary.df.get(term, 0)
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        score += idf * f * (BM25_K1 + 1) / (f + norm)
    return score


def _as_array(v) -> np.ndarray:
    if isinstance(v, DenseVector):
        return v.values
    return np.asarray(v, dtype=np.float64)


def cosine_similarity(a, b) -> float:
    """Cosine of two vectors (sparse or dense); a zero vector yields 0 with a warning."""
    if isinstance(a, SparseVector) or isinstance(b, SparseVector):
        if not (isinstance(a, SparseVector) and isinstance(b, SparseVector)):
            raise TypeError("cannot mix sparse and dense vectors")
        na, nb = a.norm(), b.norm()
        if na == 0.0 or nb == 0.0:
            warnings.warn("cosine similarity of a zero vector is defined as 0", stacklevel=2)
            return 0.0
        common, ia, ib = np.intersect1d(a.ids, b.ids, return_indices=True)
        if common.size == 0:
            return 0.0
        return float(np.dot(a.weights[ia], b.weights[ib]) / (na * nb))
    va, vb = _as_array(a), _as_array(b)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine similarity of a zero vector is defined as 0", stacklevel=2)
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


class EmbeddingProvider:
    """Contract for dense text embedding backends."""

    name: str
    dimension: int

    def embed(self, text: str) -> DenseVector:
        raise NotImplementedError

    def embed_batch(self, texts: list[str]) -> list[DenseVector]:
        return [self.embed(t) for t in texts]


class HashEmbeddingProvider(EmbeddingProvider):
    """Deterministic bag-of-tokens hash projection; the bundled test provider.

    Each token is SHA-1 hashed to pick one of ``dimension`` buckets and a
    sign, counts accumulate, and the vector is L2-normalized.  Pure function
    of the text, reproducible across platforms and processes.
    """

    def __init__(self, dimension: int = 256, name: str = "test-embedding"):
        self.name = name
        self.dimension = dimension

    def embed(self, text: str) -> DenseVector:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token, count in Counter(tokenize(text)).items():
            digest = hashlib.sha1(token.encode("utf-8")).digest()
            idx = int.from_bytes(digest[:8], "big") % self.dimension
            sign = 1.0 if digest[8] & 1 else -1.0
            vec[idx] += sign * count
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return DenseVector(vec, self.name)


class HttpEmbeddingProvider(EmbeddingProvider):
    """Client for an external embedding service (USE, Word2Vec, clinical BERTs, ...)."""

    def __init__(
        self,
        endpoint: str,
        dimension: int,
        name: str = "http-embedding",
        auth_env: str | None = None,
        timeout_s: float = 30.0,
    ):
        self.endpoint = endpoint
        self.dimension = dimension
        self.name = name
        self.auth_env = auth_env
        self.timeout_s = timeout_s

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            secret = os.environ.get(self.auth_env)
            if not secret:
                raise EmbeddingError(f"provider {self.name}: env var {self.auth_env} is not set")
            headers["Authorization"] = f"Bearer {secret}"
        return headers

    def embed(self, text: str) -> DenseVector:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: list[str]) -> list[DenseVector]:
        try:
            resp = requests.post(
                self.endpoint, json={"texts": texts}, headers=self._headers(), timeout=self.timeout_s
            )
            resp.raise_for_status()
            payload = resp.json()
        except EmbeddingError:
            raise
        except Exception as exc:
            raise EmbeddingError(f"provider {self.name}: {exc}") from exc
        vectors = payload.get("vectors")
        dim = payload.get("dimension")
        if vectors is None or dim != self.dimension or len(vectors) != len(texts):
            raise EmbeddingError(f"provider {self.name}: malformed embedding response")
        out = []
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (self.dimension,) or not np.all(np.isfinite(arr)):
                raise EmbeddingError(f"provider {self.name}: bad vector in response")
            out.append(DenseVector(arr, self.name))
        return out


def rank_by_model(model, query, corpus) -> Ranking:
    """Rank every corpus document against a query under one model.

    ``model`` is ``"tfidf"``, ``"bm25"``, or an :class:`EmbeddingProvider`.
    Full descending ordering; score ties break by ascending doc id.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if model == "tfidf":
        index = build_tfidf(corpus)
        qv = index.vectorize(tokenize(query.text))
        if qv.ids.size == 0:
            warnings.warn("query shares no terms with the corpus", stacklevel=2)
            scores = {d.doc_id: 0.0 for d in corpus}
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                scores = {d.doc_id: cosine_similarity(qv, index.vectors[d.doc_id]) for d in corpus}
        name = "tfidf"
    elif model == "bm25":
        index = build_bm25(corpus)
        qtokens = tokenize(query.text)
        scores = {d.doc_id: bm25_score(index, qtokens, d.doc_id) for d in corpus}
        name = "bm25"
    elif isinstance(model, EmbeddingProvider):
        try:
            vectors = model.embed_batch([query.text] + [d.text for d in corpus])
        except EmbeddingError:
            raise
        except Exception as exc:
            raise EmbeddingError(f"provider {model.name}: {exc}") from exc
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scores = {
                d.doc_id: cosine_similarity(vectors[0], vectors[i + 1])
                for i, d in enumerate(corpus)
            }
        name = model.name
    else:
        raise ValueError(f"unknown ranking model: {model!r}")
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return Ranking(
        model=name,
        entries=tuple((doc_id, score, rank) for rank, (doc_id, score) in enumerate(ordered, 1)),
    )
