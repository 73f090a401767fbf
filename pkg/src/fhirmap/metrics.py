"""Scoring against gold mappings, confidence intervals, and report emission.

Resource-level identification is the fraction of queries whose top-1 fused
resource equals gold.  Attribute-level mapping reports hit@1 (top-1 candidate
in the gold set) and hit@3 (any non-placeholder candidate in the gold set);
gold sets may hold several acceptable paths, and a hit means non-empty
intersection unless strict exact-set mode is on.

Confidence intervals are Student-t over per-run accuracies, clamped to
[0, 1]; a seeded percentile bootstrap is available for sensitivity checks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .ingest import FhirResourceDoc
from .validation import (
    PLACEHOLDER,
    AttributeMapping,
    MappingDocument,
    validate_mapping,
)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class GoldMapping:
    """Expert reference: gold resource per table, acceptable paths per attribute."""

    table_resources: dict[str, str]
    attribute_paths: dict[str, frozenset[str]]

    @classmethod
    def load(cls, path: str | Path) -> "GoldMapping":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        tables = {tid: entry["resource"] for tid, entry in raw.get("tables", {}).items()}
        attrs = {
            name: frozenset(entry["paths"]) for name, entry in raw.get("attributes", {}).items()
        }
        for name, paths in attrs.items():
            if not paths:
                raise EvaluationError(f"gold attribute {name!r} has no acceptable paths")
        return cls(tables, attrs)

    def paths_for(self, query_id: str, attribute: str) -> frozenset[str] | None:
        qualified = f"{query_id}.{attribute}"
        if qualified in self.attribute_paths:
            return self.attribute_paths[qualified]
        return self.attribute_paths.get(attribute)

    def resource_for_attribute(self, query_id: str, attribute: str) -> str | None:
        paths = self.paths_for(query_id, attribute)
        if not paths:
            return None
        return sorted(p.split(".", 1)[0] for p in paths)[0]


def check_gold(gold: GoldMapping, corpus: list[FhirResourceDoc]):
    """Every gold path must validate against the corpus with zero issues."""
    doc = MappingDocument(
        tuple(
            AttributeMapping(name, tuple(sorted(paths))[:3])
            for name, paths in sorted(gold.attribute_paths.items())
        )
    )
    issues = validate_mapping(doc, corpus)
    if issues:
        lines = "; ".join(f"{i.attribute}: {i.path} ({i.kind})" for i in issues[:10])
        raise EvaluationError(f"gold mapping does not validate: {lines}")
    names = {r.resource_name for r in corpus}
    missing = sorted(r for r in gold.table_resources.values() if r not in names)
    if missing:
        raise EvaluationError(f"gold resources missing from corpus: {', '.join(missing)}")


def score_resource_identification(results, gold: GoldMapping) -> float:
    """Fraction of queries whose top-1 fused resource equals the gold resource."""
    if not results:
        raise EvaluationError("empty evaluation set")
    hits = 0
    for res in results:
        if res.query_id not in gold.table_resources:
            raise EvaluationError(f"query {res.query_id!r} has no gold resource")
        hits += bool(res.top) and res.top[0][0] == gold.table_resources[res.query_id]
    return hits / len(results)


@dataclass(frozen=True)
class ResourceRecall:
    """Gold-resource recall within top-k retrieval, under both denominators."""

    per_attribute: float
    per_cluster: float
    attribute_denominator: int
    cluster_denominator: int


def score_resource_recall(
    results, clusters: dict[str, list[str]], gold: GoldMapping
) -> ResourceRecall:
    """Realworld scoring: is each attribute's gold resource inside its cluster's
    top-k?  The cluster-level denominator uses the majority gold resource of
    the cluster's members (ties break lexicographically)."""
    by_query = {res.query_id: [name for name, _ in res.top] for res in results}
    attr_hits = attr_total = 0
    cluster_hits = cluster_total = 0
    for query_id, members in clusters.items():
        top = by_query.get(query_id, [])
        member_resources = []
        for attribute in members:
            resource = gold.resource_for_attribute(query_id, attribute)
            if resource is None:
                continue
            member_resources.append(resource)
            attr_total += 1
            attr_hits += resource in top
        if not member_resources:
            continue
        counts: dict[str, int] = {}
        for r in member_resources:
            counts[r] = counts.get(r, 0) + 1
        majority = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        cluster_total += 1
        cluster_hits += majority in top
    if attr_total == 0:
        raise EvaluationError("no attribute in any cluster is covered by gold")
    return ResourceRecall(
        per_attribute=attr_hits / attr_total,
        per_cluster=cluster_hits / cluster_total,
        attribute_denominator=attr_total,
        cluster_denominator=cluster_total,
    )


@dataclass(frozen=True)
class AttributeScore:
    hit_at_1: float
    hit_at_3: float
    denominator: int
    unmapped: int


def score_attribute_mapping(
    docs: list[MappingDocument], gold: GoldMapping, strict: bool = False
) -> AttributeScore:
    """hit@1 and hit@3 over every attribute of every document.

    Unmapped attributes (empty candidate list) count as misses.  In strict
    mode an attribute only scores when its non-placeholder candidate set
    equals the gold set exactly.
    """
    total = unmapped = hit1 = hit3 = 0
    for doc in docs:
        query_id = doc.provenance.query_id if doc.provenance else ""
        for m in doc.mappings:
            paths = gold.paths_for(query_id, m.attribute)
            if paths is None:
                raise EvaluationError(f"attribute {m.attribute!r} is not covered by gold")
            total += 1
            real = [c for c in m.candidates if c != PLACEHOLDER]
            if not real:
                unmapped += 1
                continue
            if strict:
                exact = set(real) == set(paths)
                hit1 += exact
                hit3 += exact
            else:
                hit1 += real[0] in paths
                hit3 += any(c in paths for c in real)
    if total == 0:
        raise EvaluationError("no attributes to score")
    return AttributeScore(hit1 / total, hit3 / total, total, unmapped)


def confidence_interval(
    samples, level: float = 0.95, method: str = "t", seed: int = 0
) -> tuple[float, float]:
    """CI over run accuracies, clamped to [0, 1].

    ``method="t"`` is mean +/- t(N-1, (1+level)/2) * SD / sqrt(N);
    ``method="bootstrap"`` is a seeded 10k-resample percentile interval.
    """
    xs = np.asarray(list(samples), dtype=np.float64)
    if xs.size < 2:
        raise EvaluationError("confidence interval needs at least 2 samples")
    if np.any((xs < 0) | (xs > 1)):
        raise EvaluationError("samples must lie in [0, 1]")
    mean = float(xs.mean())
    if method == "t":
        sd = float(xs.std(ddof=1))
        margin = float(stats.t.ppf((1 + level) / 2, xs.size - 1)) * sd / np.sqrt(xs.size)
        lo, hi = mean - margin, mean + margin
    elif method == "bootstrap":
        rng = np.random.default_rng(seed)
        means = rng.choice(xs, size=(10_000, xs.size), replace=True).mean(axis=1)
        alpha = (1 - level) / 2
        lo, hi = (float(q) for q in np.quantile(means, [alpha, 1 - alpha]))
    else:
        raise EvaluationError(f"unknown CI method {method!r}")
    return max(0.0, lo), min(1.0, hi)


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    seed: int
    label: str  # report row label, e.g. "t=0" or the strategy name
    params: dict
    resource_accuracy: float | None
    hit_at_1: float | None
    hit_at_3: float | None
    timestamp: float = field(default_factory=time.time)

    def metrics(self) -> dict[str, float]:
        out = {}
        if self.resource_accuracy is not None:
            out["resource_accuracy"] = self.resource_accuracy
        if self.hit_at_1 is not None:
            out["hit_at_1"] = self.hit_at_1
        if self.hit_at_3 is not None:
            out["hit_at_3"] = self.hit_at_3
        return out


@dataclass(frozen=True)
class MetricStats:
    mean: float
    sd: float | None
    ci: tuple[float, float] | None
    n: int


def summarize(records: list[RunRecord], method: str = "t") -> dict[str, dict[str, MetricStats]]:
    """Per label, per metric: mean, sample SD, and 95% CI (when N >= 2)."""
    if not records:
        raise EvaluationError("no run records")
    by_label: dict[str, list[RunRecord]] = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    out: dict[str, dict[str, MetricStats]] = {}
    for label, runs in by_label.items():
        metrics: dict[str, MetricStats] = {}
        names = sorted({name for r in runs for name in r.metrics()})
        for name in names:
            xs = [r.metrics()[name] for r in runs if name in r.metrics()]
            if len(xs) >= 2:
                sd = float(np.std(xs, ddof=1))
                ci = confidence_interval(xs, method=method)
            else:
                sd, ci = None, None
            metrics[name] = MetricStats(float(np.mean(xs)), sd, ci, len(xs))
        out[label] = metrics
    return out


def render_table(
    summary: dict[str, dict[str, MetricStats]], metric: str, title: str
) -> str:
    """Plain-text table with one row per label: ``t=0   66.780 to 69.630``."""
    lines = [title, "-" * len(title)]
    for label in sorted(summary):
        stats_for = summary[label]
        if metric not in stats_for:
            continue
        st = stats_for[metric]
        if st.ci is None:
            lines.append(f"{label}\t{st.mean * 100:.3f} (single run; CI requires N >= 2)")
        else:
            lo, hi = st.ci
            lines.append(f"{label}\t{lo * 100:.3f} to {hi * 100:.3f}")
    return "\n".join(lines) + "\n"


def emit_report(
    records: list[RunRecord],
    destination: str | Path,
    primary_metric: str = "hit_at_1",
    config_echo: dict | None = None,
    ci_method: str = "t",
) -> tuple[Path, Path]:
    """Write ``report.json`` and a paper-tables-shaped ``report.txt``.

    The JSON ``results`` section is deterministic for identical inputs;
    timestamps live only under ``meta``.
    """
    destination = Path(destination)
    destination.mkdir(parents=True, exist_ok=True)
    summary = summarize(records, method=ci_method)
    results = {
        "primary_metric": primary_metric,
        "ci_method": ci_method,
        "config": config_echo or {},
        "groups": {
            label: {
                name: {
                    "mean": st.mean,
                    "sd": st.sd,
                    "ci": list(st.ci) if st.ci else None,
                    "n": st.n,
                }
                for name, st in metrics.items()
            }
            for label, metrics in summary.items()
        },
        "runs": [
            {
                "run_id": r.run_id,
                "seed": r.seed,
                "label": r.label,
                "params": r.params,
                **r.metrics(),
            }
            for r in records
        ],
        "notes": [
            "CI method over run accuracies: " + ci_method,
            "gold sets may contain several acceptable paths; a hit is a non-empty intersection",
        ],
    }
    payload = {"meta": {"generated_at": time.time()}, "results": results}
    json_path = destination / "report.json"
    txt_path = destination / "report.txt"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    title = f"95% confidence intervals, {primary_metric} (%)"
    txt_path.write_text(render_table(summary, primary_metric, title), encoding="utf-8")
    return json_path, txt_path
