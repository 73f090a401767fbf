"""End-to-end orchestration: ingest, cluster, retrieve, map, eval.

Every stage reads the persisted artifacts of the stage before it and writes
its own artifact into the output directory, so the subcommands can be chained
or run in one go with ``run_pipeline``.  All artifacts are plain JSON / JSON
Lines, embed the config hash, and contain no timestamps outside report
metadata; with the mock provider and a fixed master seed two executions are
byte-identical.

Per-run seeds are ``master_seed + run_index``.  Clustering and retrieval
derive from the master seed only (they are context building, shared by all
runs); the per-run seed feeds run provenance and report resampling.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .clustering import FeatureMatrix, NOISE, default_grid, select_clustering
from .fusion import RetrievalResult, retrieve_resources
from .gateway import ChatMessage, ChatRequest, GatewayClient, ProviderConfig
from .ingest import (
    AttributeCluster,
    AttributeDescriptor,
    CanonicalDocument,
    TableDescriptor,
    canonicalize,
    load_dataset_descriptor,
    load_fhir_corpus,
    serialize_dataset,
)
from .lexical import EmbeddingProvider, HashEmbeddingProvider, HttpEmbeddingProvider
from .metrics import (
    GoldMapping,
    RunRecord,
    check_gold,
    emit_report,
    score_attribute_mapping,
    score_resource_identification,
    score_resource_recall,
)
from .prompts import (
    DONE,
    GenerationParams,
    PromptContext,
    ToolSchema,
    build_plan,
    clamp_top_p,
    next_step,
    aggregate,
)
from .validation import (
    MappingDocument,
    AttributeMapping,
    MappingFormatError,
    MappingParseError,
    Provenance,
    parse_mapping_response,
    validate_mapping,
)


class ConfigError(ValueError):
    """Invalid pipeline configuration or stale/missing stage artifacts (exit 2)."""


class ValidationFatal(RuntimeError):
    """No parseable mapping could be produced (exit 4)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


SCENARIOS = ("baseline", "realworld")


@dataclass(frozen=True)
class PipelineConfig:
    scenario: str
    dataset: str
    corpus: str
    out: str
    gold: str | None = None
    models: tuple[str, ...] = ("tfidf", "bm25", "test-embedding")
    k_const: int = 60
    top_k: int | None = None  # defaults: 1 baseline, 5 realworld
    strategy: str | None = None  # defaults: Reflexive baseline, RealWorldRefined realworld
    temperature: float = 0.0
    top_p: float | None = None  # defaults: 1.0 baseline, min positive realworld
    max_candidates: int = 3
    runs: int = 1
    seed: int = 0
    grid: tuple = ()
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    embedding: dict = field(default_factory=lambda: {"kind": "hash", "dimension": 256})
    strict_scoring: bool = False
    ci_method: str = "t"
    parallel_runs: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.parallel_runs < 1:
            raise ConfigError("parallel_runs must be >= 1")
        if self.parallel_runs > 1 and self.effective_strategy() in (
            "Reflexive", "Serial5Schema", "Serial5NoSchema",
        ):
            raise ConfigError(
                "parallel runs are permitted only with independent strategies, "
                "never within a serial conversation"
            )

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        try:
            provider = ProviderConfig.from_dict(raw.get("provider", {}))
            return cls(
                scenario=raw["scenario"],
                dataset=raw["dataset"],
                corpus=raw["corpus"],
                out=raw.get("out", "out"),
                gold=raw.get("gold"),
                models=tuple(raw.get("models", ("tfidf", "bm25", "test-embedding"))),
                k_const=raw.get("k_const", 60),
                top_k=raw.get("top_k"),
                strategy=raw.get("strategy"),
                temperature=raw.get("temperature", 0.0),
                top_p=raw.get("top_p"),
                max_candidates=raw.get("max_candidates", 3),
                runs=raw.get("runs", 1),
                seed=raw.get("seed", 0),
                grid=tuple(raw.get("grid", ())),
                provider=provider,
                embedding=raw.get("embedding", {"kind": "hash", "dimension": 256}),
                strict_scoring=raw.get("strict_scoring", False),
                ci_method=raw.get("ci_method", "t"),
                parallel_runs=raw.get("parallel_runs", 1),
            )
        except KeyError as exc:
            raise ConfigError(f"config is missing required field {exc}") from exc

    def effective_top_k(self) -> int:
        return self.top_k if self.top_k is not None else (1 if self.scenario == "baseline" else 5)

    def effective_strategy(self) -> str:
        if self.strategy:
            return self.strategy
        return "Reflexive" if self.scenario == "baseline" else "RealWorldRefined"

    def effective_params(self) -> GenerationParams:
        if self.top_p is not None:
            top_p = clamp_top_p(self.top_p)
        else:
            top_p = 1.0 if self.scenario == "baseline" else clamp_top_p(0.0)
        return GenerationParams(
            temperature=self.temperature, top_p=top_p, max_candidates=self.max_candidates
        )

    def effective_grid(self) -> list[dict]:
        return list(self.grid) if self.grid else default_grid()

    def semantic_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "dataset": self.dataset,
            "corpus": self.corpus,
            "gold": self.gold,
            "models": list(self.models),
            "k_const": self.k_const,
            "top_k": self.effective_top_k(),
            "strategy": self.effective_strategy(),
            "temperature": self.temperature,
            "top_p": self.effective_params().top_p,
            "max_candidates": self.max_candidates,
            "runs": self.runs,
            "seed": self.seed,
            "grid": self.effective_grid() if self.scenario == "realworld" else [],
            "provider": {
                "kind": self.provider.kind,
                "endpoint": self.provider.endpoint,
                "model": self.provider.model,
            },
            "embedding": self.embedding,
            "strict_scoring": self.strict_scoring,
            "ci_method": self.ci_method,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def embedding_provider(config: PipelineConfig) -> EmbeddingProvider:
    spec = config.embedding
    kind = spec.get("kind", "hash")
    if kind == "hash":
        return HashEmbeddingProvider(dimension=spec.get("dimension", 256))
    if kind == "http":
        return HttpEmbeddingProvider(
            endpoint=spec["endpoint"],
            dimension=spec["dimension"],
            name=spec.get("name", "http-embedding"),
            auth_env=spec.get("auth_env"),
            timeout_s=spec.get("timeout_s", 30.0),
        )
    raise ConfigError(f"unknown embedding provider kind {kind!r}")


def resolve_models(config: PipelineConfig) -> list:
    provider = embedding_provider(config)
    models = []
    for name in config.models:
        if name in ("tfidf", "bm25"):
            models.append(name)
        elif name == provider.name:
            models.append(provider)
        else:
            raise ConfigError(
                f"unknown retrieval model {name!r} (embedding provider is {provider.name!r})"
            )
    return models


# ---------------------------------------------------------------------------
# artifact helpers

ARTIFACTS = {
    "ingest": "ingest.json",
    "clusters": "clusters.json",
    "retrieval": "retrieval.json",
    "mappings": "mappings.jsonl",
}


def _artifact_path(config: PipelineConfig, name: str) -> Path:
    return Path(config.out) / ARTIFACTS[name]


def _read_artifact(config: PipelineConfig, name: str) -> dict:
    path = _artifact_path(config, name)
    if not path.exists():
        raise ConfigError(f"missing upstream artifact {path}; run the earlier stage first")
    if name == "mappings":
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
        hashes = {row["config_hash"] for row in rows}
        if hashes - {config.config_hash()}:
            raise ConfigError(f"artifact {path} was produced under a different config")
        return {"rows": rows}
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("config_hash") != config.config_hash():
        raise ConfigError(f"artifact {path} was produced under a different config")
    return payload


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# stages

def stage_ingest(config: PipelineConfig) -> dict:
    tables = load_dataset_descriptor(config.dataset)
    corpus = load_fhir_corpus(config.corpus)
    if config.gold:
        check_gold(GoldMapping.load(config.gold), corpus)
    payload = {
        "config_hash": config.config_hash(),
        "scenario": config.scenario,
        "dataset": serialize_dataset(tables),
        "corpus_dir": str(config.corpus),
        "resources": [r.resource_name for r in corpus],
    }
    _write_json(_artifact_path(config, "ingest"), payload)
    return payload


def _tables_from_artifact(payload: dict) -> list[TableDescriptor]:
    return [
        TableDescriptor(
            id=t["id"],
            name=t["name"],
            description=t["description"],
            use_case=t["use_case"],
            attributes=tuple(
                AttributeDescriptor(
                    name=a["name"],
                    description=a["description"],
                    example_values=tuple(a["example_values"]),
                    source_table=a["source_table"],
                )
                for a in t["attributes"]
            ),
        )
        for t in payload["dataset"]["tables"]
    ]


def stage_cluster(config: PipelineConfig) -> dict:
    if config.scenario != "realworld":
        raise ConfigError("clustering applies to realworld scenario")
    ingest = _read_artifact(config, "ingest")
    tables = _tables_from_artifact(ingest)
    attributes = [a for t in tables for a in t.attributes]
    provider = embedding_provider(config)
    vectors = provider.embed_batch([canonicalize(a).text for a in attributes])
    matrix = FeatureMatrix(
        tuple(a.name for a in attributes), np.vstack([v.values for v in vectors])
    )
    assignment, quality = select_clustering(matrix, config.effective_grid(), seed=config.seed)
    members = assignment.members()
    payload = {
        "config_hash": config.config_hash(),
        "algorithm": assignment.algorithm,
        "params": assignment.params,
        "clusters": [
            {"label": label, "attributes": sorted(names)}
            for label, names in sorted(members.items())
            if label != NOISE
        ],
        "noise": sorted(members.get(NOISE, [])),
        "quality": {
            "silhouette": quality.silhouette,
            "calinski_harabasz": quality.calinski_harabasz,
            "davies_bouldin": quality.davies_bouldin,
            "cluster_count": quality.cluster_count,
            "noise_count": quality.noise_count,
        },
    }
    _write_json(_artifact_path(config, "clusters"), payload)
    return payload


@dataclass(frozen=True)
class QueryGroup:
    """One retrieval + mapping unit: a table (baseline) or a cluster (realworld)."""

    query_id: str
    kind: str  # table | cluster
    name: str
    description: str
    attributes: tuple[AttributeDescriptor, ...]
    canonical: CanonicalDocument


def build_groups(config: PipelineConfig, tables: list[TableDescriptor]) -> list[QueryGroup]:
    if config.scenario == "baseline":
        return [
            QueryGroup(t.id, "table", t.name, t.description, t.attributes, canonicalize(t))
            for t in tables
        ]
    clusters = _read_artifact(config, "clusters")
    by_name = {a.name: a for t in tables for a in t.attributes}
    groups: list[QueryGroup] = []
    for entry in clusters["clusters"]:
        members = tuple(by_name[n] for n in entry["attributes"])
        cluster = AttributeCluster(entry["label"], members)
        doc = canonicalize(cluster)
        description = "Attributes grouped by semantic similarity (unsupervised)."
        groups.append(
            QueryGroup(doc.doc_id, "cluster", doc.doc_id, description, members, doc)
        )
    # unclustered attributes are retrieved and mapped individually
    for name in clusters["noise"]:
        a = by_name[name]
        groups.append(
            QueryGroup(
                a.name, "cluster", a.name,
                "Single attribute (not grouped by clustering).",
                (a,), canonicalize(a),
            )
        )
    return groups


def stage_retrieve(config: PipelineConfig) -> dict:
    ingest = _read_artifact(config, "ingest")
    tables = _tables_from_artifact(ingest)
    corpus = load_fhir_corpus(ingest["corpus_dir"])
    groups = build_groups(config, tables)
    models = resolve_models(config)
    queries = []
    for g in groups:
        res = retrieve_resources(
            g.canonical, corpus, models, config.effective_top_k(), config.k_const
        )
        queries.append(
            {
                "query_id": g.query_id,
                "kind": g.kind,
                "k": res.k,
                "top": [[name, score] for name, score in res.top],
                "fused": [[name, score] for name, score in res.fused.entries],
                "models": list(res.fused.models),
                "failed_models": list(res.failed_models),
            }
        )
    payload = {"config_hash": config.config_hash(), "queries": queries}
    _write_json(_artifact_path(config, "retrieval"), payload)
    return payload


def _results_from_artifact(payload: dict) -> list[RetrievalResult]:
    return [
        RetrievalResult(
            query_id=q["query_id"],
            top=tuple((name, score) for name, score in q["top"]),
            k=q["k"],
        )
        for q in payload["queries"]
    ]


def execute_plan(plan, client: GatewayClient, expected_attributes: list[str]):
    """Drive a plan to completion against the gateway; returns the aggregated
    document (provenance unfilled) and any per-step parse failures."""
    transcript: list[str] = []
    parsed: list[MappingDocument] = []
    failures: list[str] = []
    while True:
        step = next_step(plan, transcript)
        if step == DONE:
            break
        request = ChatRequest(
            messages=(ChatMessage("user", step.text),),
            params=plan.params,
            tools=step.tools,
            function_call=plan.params.function_call,
        )
        response = client.send(request)
        transcript.append(response.content())
        try:
            parsed.append(parse_mapping_response(response, expected_attributes))
        except (MappingParseError, MappingFormatError) as exc:
            failures.append(f"step {len(transcript)}: {exc}")
    if not parsed:
        raise ValidationFatal(f"no valid mapping produced: {'; '.join(failures)}")
    return aggregate(plan, parsed), failures


def stage_map(config: PipelineConfig, client: GatewayClient | None = None) -> dict:
    ingest = _read_artifact(config, "ingest")
    retrieval = _read_artifact(config, "retrieval")
    tables = _tables_from_artifact(ingest)
    corpus = load_fhir_corpus(ingest["corpus_dir"])
    by_resource = {r.resource_name: r for r in corpus}
    groups = {g.query_id: g for g in build_groups(config, tables)}
    client = client or GatewayClient(config.provider)
    strategy = config.effective_strategy()
    params = config.effective_params()

    def map_one_run(run_index: int) -> list[dict]:
        rows = []
        run_seed = config.seed + run_index
        run_id = f"run{run_index}"
        for q in retrieval["queries"]:
            group = groups[q["query_id"]]
            candidates = [name for name, _ in q["top"]]
            schemas = tuple(
                ToolSchema(n, by_resource[n].schema, by_resource[n].description)
                for n in candidates
                if n in by_resource
            )
            context = PromptContext(
                query_id=group.query_id,
                source_kind=group.kind,
                source_name=group.name,
                description=group.description,
                attributes=group.attributes,
                candidate_resources=tuple(candidates),
                schemas=schemas,
            )
            plan = build_plan(strategy, context, params)
            doc, parse_failures = execute_plan(
                plan, client, [a.name for a in group.attributes]
            )
            provenance = Provenance(
                strategy=strategy,
                run_id=run_id,
                provider=f"{config.provider.kind}:{config.provider.model}",
                query_id=group.query_id,
                params={
                    "temperature": params.temperature,
                    "top_p": params.top_p,
                    "max_candidates": params.max_candidates,
                    "seed": run_seed,
                },
            )
            doc = replace(doc, provenance=provenance)
            issues = validate_mapping(doc, corpus)
            issues_by_attr: dict[str, list] = {}
            for issue in issues:
                issues_by_attr.setdefault(issue.attribute, []).append(issue)
            for m in doc.mappings:
                rows.append(
                    {
                        "config_hash": config.config_hash(),
                        "run_id": run_id,
                        "query_id": group.query_id,
                        "attribute": m.attribute,
                        "candidates": list(m.candidates),
                        "low_confidence": m.low_confidence,
                        "issues": [
                            {"kind": i.kind, "path": i.path, "message": i.message}
                            for i in issues_by_attr.get(m.attribute, [])
                        ],
                        "parse_failures": parse_failures,
                        "provenance": {
                            "strategy": provenance.strategy,
                            "run_id": provenance.run_id,
                            "provider": provenance.provider,
                            "query_id": provenance.query_id,
                            "params": provenance.params,
                        },
                    }
                )
        return rows

    if config.parallel_runs > 1 and config.runs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.parallel_runs) as pool:
            per_run = list(pool.map(map_one_run, range(config.runs)))
    else:
        per_run = [map_one_run(i) for i in range(config.runs)]
    rows = [row for run_rows in per_run for row in run_rows]

    path = _artifact_path(config, "mappings")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return {"rows": rows}


def _documents_from_rows(rows: list[dict]) -> dict[str, list[MappingDocument]]:
    """Rebuild per-run mapping documents from persisted JSONL rows."""
    grouped: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        grouped.setdefault((row["run_id"], row["query_id"]), []).append(row)
    by_run: dict[str, list[MappingDocument]] = {}
    for (run_id, query_id), doc_rows in sorted(grouped.items()):
        mappings = tuple(
            AttributeMapping(
                r["attribute"], tuple(r["candidates"]), low_confidence=r["low_confidence"]
            )
            for r in doc_rows
        )
        p = doc_rows[0]["provenance"]
        provenance = Provenance(
            strategy=p["strategy"], run_id=p["run_id"], provider=p["provider"],
            query_id=p["query_id"], params=p["params"],
        )
        by_run.setdefault(run_id, []).append(MappingDocument(mappings, provenance))
    return by_run


def stage_eval(config: PipelineConfig) -> dict:
    if not config.gold:
        raise ConfigError("gold mapping required for eval")
    retrieval = _read_artifact(config, "retrieval")
    mappings = _read_artifact(config, "mappings")
    gold = GoldMapping.load(config.gold)
    results = _results_from_artifact(retrieval)
    strategy = config.effective_strategy()
    params = config.effective_params()

    if config.scenario == "baseline":
        resource_metric = {"resource_accuracy": score_resource_identification(results, gold)}
        label = strategy
        primary = "hit_at_1"
    else:
        clusters = _read_artifact(config, "clusters")
        member_map = {f"cluster_{c['label']}": c["attributes"] for c in clusters["clusters"]}
        member_map.update({name: [name] for name in clusters["noise"]})
        recall = score_resource_recall(results, member_map, gold)
        resource_metric = {
            "resource_accuracy": recall.per_attribute,
            "resource_recall_per_cluster": recall.per_cluster,
        }
        label = f"t={config.temperature:g}"
        primary = "hit_at_3"

    records = []
    for run_id, docs in sorted(_documents_from_rows(mappings["rows"]).items()):
        score = score_attribute_mapping(docs, gold, strict=config.strict_scoring)
        run_index = int(run_id.removeprefix("run"))
        records.append(
            RunRecord(
                run_id=run_id,
                seed=config.seed + run_index,
                label=label,
                params={"temperature": params.temperature, "top_p": params.top_p},
                resource_accuracy=resource_metric["resource_accuracy"],
                hit_at_1=score.hit_at_1,
                hit_at_3=score.hit_at_3,
            )
        )
    json_path, txt_path = emit_report(
        records,
        config.out,
        primary_metric=primary,
        config_echo={**config.semantic_dict(), **{
            k: v for k, v in resource_metric.items() if k != "resource_accuracy"
        }},
        ci_method=config.ci_method,
    )
    return {
        "records": records,
        "report_json": str(json_path),
        "report_txt": str(txt_path),
        "resource_metrics": resource_metric,
    }


STAGE_ORDER = ("ingest", "cluster", "retrieve", "map", "eval")


def run_pipeline(config: PipelineConfig, client: GatewayClient | None = None) -> dict:
    """Run every stage in order, aborting with stage attribution on failure.

    A failing stage leaves a ``FAILED`` marker next to whatever artifacts were
    already flushed.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    stages = [("ingest", lambda: stage_ingest(config))]
    if config.scenario == "realworld":
        stages.append(("cluster", lambda: stage_cluster(config)))
    stages.append(("retrieve", lambda: stage_retrieve(config)))
    stages.append(("map", lambda: stage_map(config, client)))
    if config.gold:
        stages.append(("eval", lambda: stage_eval(config)))
    outputs = {}
    for name, fn in stages:
        try:
            outputs[name] = fn()
        except Exception as exc:
            marker.write_text(f"stage {name} failed: {exc}\n", encoding="utf-8")
            raise StageError(name, exc) from exc
    return outputs
