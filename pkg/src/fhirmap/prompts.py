"""Prompt strategies, multi-turn plans, and the structured-output contract.

Five strategies: Reflexive (answer, then refine it in a second turn), MoP
(three distinct prompt variants, answers aggregated by majority vote),
Serial5Schema / Serial5NoSchema (a five-step refinement sequence with or
without attached resource schemas), and RealWorldRefined (single enhanced
prompt asking for the top three element paths per attribute with "N/A"
placeholders).

Templates live in ``templates/`` as plain text with ``{{slot}}`` markers and
are rendered deterministically: identical context yields byte-identical
prompts.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources

from .ingest import AttributeDescriptor
from .validation import (
    PLACEHOLDER,
    AttributeMapping,
    MappingDocument,
    Provenance,
)

STRATEGIES = ("Reflexive", "MoP", "Serial5Schema", "Serial5NoSchema", "RealWorldRefined")

MOP_VARIANTS = 3

# real APIs reject top_p=0; the smallest accepted positive value keeps the intent
MIN_TOP_P = 1e-9

RESPONSE_FORMAT_INSTRUCTION = (
    'Respond with only a JSON object of this exact form:\n'
    '{"mappings": [{"attribute": "<column name>", '
    '"candidates": ["<Resource.element.path>", ...]}]}\n'
    'List every attribute exactly once, with its candidates ranked best first '
    'and "N/A" filling unused candidate slots.'
)

ATTRIBUTES_HEADER = "Attributes to map:"
CANDIDATES_HEADER = "Candidate FHIR resources:"

DONE = "DONE"


class PromptError(ValueError):
    """Invalid strategy, missing schema, or a transcript/plan mismatch."""


@dataclass(frozen=True)
class ToolSchema:
    """A callable-tool view of one FHIR resource: name + its JSON schema."""

    name: str
    parameters: dict
    description: str = ""


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    top_p: float = 1.0
    function_call: str = "auto"  # auto | none
    max_candidates: int = 3

    def __post_init__(self):
        if self.temperature < 0:
            raise PromptError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise PromptError("top_p must be in (0, 1]; use clamp_top_p for 0")
        if self.function_call not in ("auto", "none"):
            raise PromptError("function_call must be 'auto' or 'none'")
        if self.max_candidates < 1:
            raise PromptError("max_candidates must be >= 1")


def clamp_top_p(value: float) -> float:
    """Map the paper-style top_p=0 to the smallest accepted positive value."""
    return MIN_TOP_P if value == 0 else value


def realworld_params() -> GenerationParams:
    return GenerationParams(temperature=0.0, top_p=MIN_TOP_P, max_candidates=3)


@dataclass(frozen=True)
class PromptContext:
    """Everything a strategy needs: the query entity, its retrieval, and schemas."""

    query_id: str
    source_kind: str  # table | cluster
    source_name: str
    description: str
    attributes: tuple[AttributeDescriptor, ...]
    candidate_resources: tuple[str, ...]
    schemas: tuple[ToolSchema, ...] = ()


@dataclass(frozen=True)
class PromptStep:
    template: str
    text: str  # fully rendered except the {{prior_response}} slot
    tools: tuple[ToolSchema, ...] = ()


@dataclass(frozen=True)
class PromptPlan:
    strategy: str
    steps: tuple[PromptStep, ...]
    aggregation: str  # last | majority
    params: GenerationParams


@dataclass(frozen=True)
class RenderedPrompt:
    step_index: int
    text: str
    tools: tuple[ToolSchema, ...]


def _load_template(name: str) -> str:
    return resources.files("fhirmap.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_attributes(attributes) -> str:
    """The shared enumeration block: one ``- name: description (examples: ...)``
    line per attribute, each name appearing exactly once."""
    lines = []
    for a in attributes:
        line = f"- {a.name}"
        if a.description:
            line += f": {a.description}"
        if a.example_values:
            line += f" (examples: {'; '.join(a.example_values)})"
        lines.append(line)
    return "\n".join(lines)


_SLOT_RE = re.compile(r"\{\{(\w+)\}\}")


def _render(template_name: str, slots: dict[str, str], allow_missing=("prior_response",)) -> str:
    text = _load_template(template_name)

    def sub(match):
        name = match.group(1)
        if name in slots:
            return slots[name]
        if name in allow_missing:
            return match.group(0)
        raise PromptError(f"template {template_name} has unfilled slot {name!r}")

    return _SLOT_RE.sub(sub, text)


def build_plan(
    strategy: str, context: PromptContext, params: GenerationParams | None = None
) -> PromptPlan:
    """Construct the step templates and schema attachments for one strategy.

    Pure: the same context renders byte-identical prompt text.  Schema-using
    strategies require a ToolSchema for every candidate resource.
    """
    if strategy not in STRATEGIES:
        raise PromptError(f"unknown strategy {strategy!r}")
    if not context.candidate_resources:
        raise PromptError("context has no candidate resources")
    if params is None:
        params = realworld_params() if strategy == "RealWorldRefined" else GenerationParams()

    with_schemas = strategy != "Serial5NoSchema"
    if with_schemas:
        by_name = {t.name: t for t in context.schemas}
        missing = [r for r in context.candidate_resources if r not in by_name]
        if missing:
            raise PromptError(f"{strategy} requires schemas; missing: {', '.join(missing)}")
        tools = tuple(by_name[r] for r in context.candidate_resources)
        schema_note = (
            "The JSON schemas of these resources are attached as callable tools; "
            "use them to verify element paths."
        )
    else:
        tools = ()
        schema_note = (
            "No JSON schemas are attached; rely on your knowledge of the official "
            "HL7 FHIR documentation."
        )

    slots = {
        "source_kind": context.source_kind,
        "source_name": context.source_name,
        "description": context.description,
        "attributes": render_attributes(context.attributes),
        "candidate_resources": ", ".join(context.candidate_resources),
        "schema_note": schema_note,
        "max_candidates": str(params.max_candidates),
        "response_format": RESPONSE_FORMAT_INSTRUCTION,
    }

    def step(template, extra=None):
        return PromptStep(template, _render(template, {**slots, **(extra or {})}), tools)

    if strategy == "Reflexive":
        steps = (step("baseline_step1"), step("reflexive_step2"))
        aggregation = "last"
    elif strategy == "MoP":
        steps = tuple(step(f"mop_variant{i}") for i in range(1, MOP_VARIANTS + 1))
        aggregation = "majority"
    elif strategy in ("Serial5Schema", "Serial5NoSchema"):
        steps = (step("baseline_step1"),) + tuple(
            step("serial_refine", {"step_number": str(i)}) for i in range(2, 6)
        )
        aggregation = "last"
    else:  # RealWorldRefined
        steps = (step("realworld_refined"),)
        aggregation = "last"
    return PromptPlan(strategy=strategy, steps=steps, aggregation=aggregation, params=params)


def _serial(plan: PromptPlan) -> bool:
    return plan.strategy != "MoP"


def next_step(plan: PromptPlan, transcript: list[str]):
    """Render the next prompt given the assistant responses so far, or DONE.

    Serial strategies embed the latest response verbatim in the
    ``{{prior_response}}`` slot; MoP steps are independent, so the transcript
    only counts completed variants.
    """
    if len(transcript) > len(plan.steps):
        raise PromptError("transcript is longer than the plan")
    if len(transcript) == len(plan.steps):
        return DONE
    step = plan.steps[len(transcript)]
    text = step.text
    if "{{prior_response}}" in text:
        if _serial(plan) and not transcript:
            raise PromptError(f"step {len(transcript)} needs a prior response")
        text = text.replace("{{prior_response}}", transcript[-1])
    return RenderedPrompt(step_index=len(transcript), text=text, tools=step.tools)


def variant_prompts(plan: PromptPlan) -> list[RenderedPrompt]:
    """All MoP variants at once (they are order-independent)."""
    if plan.strategy != "MoP":
        raise PromptError("variant_prompts applies to MoP plans")
    return [RenderedPrompt(i, s.text, s.tools) for i, s in enumerate(plan.steps)]


def _majority_vote(docs: list[MappingDocument], max_candidates: int) -> MappingDocument:
    attributes: list[str] = []
    for doc in docs:
        for m in doc.mappings:
            if m.attribute not in attributes:
                attributes.append(m.attribute)
    need = (len(docs) + 1) // 2  # majority threshold over the variants
    out = []
    for name in attributes:
        votes: Counter = Counter()
        ranks: dict[str, list[int]] = {}
        for doc in docs:
            for m in doc.mappings:
                if m.attribute != name:
                    continue
                for rank, cand in enumerate(m.candidates, 1):
                    if cand == PLACEHOLDER:
                        continue
                    ranks.setdefault(cand, []).append(rank)
                    if rank == 1:
                        votes[cand] += 1
        if not ranks:
            out.append(AttributeMapping(name, (), low_confidence=True))
            continue

        def order_key(cand):
            mean_rank = sum(ranks[cand]) / len(ranks[cand])
            return (-votes.get(cand, 0), mean_rank, cand)

        ordered = sorted(ranks, key=order_key)
        winner_votes = votes.get(ordered[0], 0)
        candidates = tuple(ordered[:max_candidates])
        candidates += (PLACEHOLDER,) * (max_candidates - len(candidates))
        out.append(AttributeMapping(name, candidates, low_confidence=winner_votes < need))
    return MappingDocument(tuple(out))


def aggregate(plan: PromptPlan, responses: list[MappingDocument]) -> MappingDocument:
    """Reduce the per-step parsed mappings to one document.

    Serial and reflexive plans take the last response; MoP majority-votes the
    top-1 path per attribute (ties by mean rank, then lexicographic path) and
    flags attributes whose winner lacks a strict majority as low confidence.
    """
    if not responses:
        raise PromptError("no valid mapping produced")
    if plan.aggregation == "last":
        result = responses[-1]
    else:
        result = _majority_vote(responses, plan.params.max_candidates)
    provenance = result.provenance or Provenance()
    return replace(result, provenance=replace(provenance, strategy=plan.strategy))
