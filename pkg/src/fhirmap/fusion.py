"""Reciprocal Rank Fusion of per-model rankings and top-k resource retrieval.

A document's fused score is ``sum over rankings of 1 / (k_const + rank)``;
documents absent from a ranking contribute nothing for it.  ``k_const``
defaults to 60.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ingest import CanonicalDocument, FhirResourceDoc, canonicalize
from .lexical import EmbeddingError, Ranking, rank_by_model

DEFAULT_K_CONST = 60


@dataclass(frozen=True)
class FusedRanking:
    """Global ordering after RRF: (doc_id, score) descending, ties by doc id."""

    entries: tuple[tuple[str, float], ...]
    k_const: int
    models: tuple[str, ...]


@dataclass(frozen=True)
class RetrievalResult:
    """Top-k fused candidates for one query, with the full fusion kept for audit."""

    query_id: str
    top: tuple[tuple[str, float], ...]
    k: int
    fused: FusedRanking | None = None
    failed_models: tuple[str, ...] = ()


def _validate_ranking(r: Ranking):
    ranks = [rank for _, _, rank in r.entries]
    if ranks != list(range(1, len(ranks) + 1)):
        raise ValueError(f"ranking for model {r.model!r} has non-consecutive ranks")
    ids = [doc_id for doc_id, _, _ in r.entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"ranking for model {r.model!r} repeats doc ids")


def rrf_fuse(rankings: list[Ranking], k_const: int = DEFAULT_K_CONST) -> FusedRanking:
    """Fuse rankings with Reciprocal Rank Fusion.

    Sorting is by descending fused score, ties broken by ascending doc id.
    Rankings need not cover identical id sets; a missing document simply
    earns nothing from that ranking.
    """
    if not rankings:
        raise ValueError("rrf_fuse needs at least one ranking")
    if k_const < 1:
        raise ValueError("k_const must be a positive integer")
    for r in rankings:
        _validate_ranking(r)
    scores: dict[str, float] = {}
    for r in rankings:
        for doc_id, _, rank in r.entries:
            scores[doc_id] = scores.get(doc_id, 0.0) + 1.0 / (k_const + rank)
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return FusedRanking(
        entries=tuple(ordered), k_const=k_const, models=tuple(r.model for r in rankings)
    )


def retrieve_resources(
    query: CanonicalDocument,
    corpus: list[FhirResourceDoc],
    models: list,
    top_k: int,
    k_const: int = DEFAULT_K_CONST,
    skip_failed_models: bool = False,
) -> RetrievalResult:
    """Rank the FHIR corpus per model, fuse, and keep the top ``top_k`` resources.

    With ``skip_failed_models`` a failing embedding provider is dropped from
    the fusion and recorded in the result instead of aborting.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not models:
        raise ValueError("at least one ranking model is required")
    docs = [canonicalize(r) for r in corpus]
    rankings: list[Ranking] = []
    failed: list[str] = []
    for model in models:
        try:
            rankings.append(rank_by_model(model, query, docs))
        except EmbeddingError as exc:
            if not skip_failed_models:
                raise
            failed.append(str(getattr(model, "name", model)))
    if not rankings:
        raise EmbeddingError(f"all ranking models failed for query {query.doc_id!r}: {failed}")
    fused = rrf_fuse(rankings, k_const)
    return RetrievalResult(
        query_id=query.doc_id,
        top=fused.entries[:top_k],
        k=top_k,
        fused=fused,
        failed_models=tuple(failed),
    )
