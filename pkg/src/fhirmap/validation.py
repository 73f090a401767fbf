"""Parsing of model mapping responses and grounding checks against the corpus.

The mapping response format is fixed:

    {"mappings": [{"attribute": "<name>", "candidates": ["<Resource.path>", ...]}]}

with at most three candidates per attribute and ``"N/A"`` as the placeholder
for unused slots.  Hallucinated paths are kept in the document and reported as
issues rather than dropped, so they stay auditable.  Path matching is
case-sensitive, as FHIR element names are.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .ingest import FhirResourceDoc

PLACEHOLDER = "N/A"
MAX_CANDIDATES = 3

_SEGMENT_RE = re.compile(r"^[A-Za-z][A-Za-z0-9]*$")

ISSUE_KINDS = ("unknown_resource", "unknown_element", "malformed", "placeholder")


class MappingParseError(ValueError):
    """Response payload is not JSON; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MappingFormatError(ValueError):
    """JSON that violates the mapping response format; names the bad field."""

    def __init__(self, fld: str, message: str):
        super().__init__(f"field {fld!r}: {message}")
        self.field = fld


class MalformedPathError(ValueError):
    pass


@dataclass(frozen=True)
class ElementPath:
    """A resource name plus a dotted path to one of its elements."""

    resource: str
    segments: tuple[str, ...]

    def __post_init__(self):
        if not self.segments:
            raise MalformedPathError(f"{self.resource!r}: path needs at least one segment")
        for part in (self.resource, *self.segments):
            if not _SEGMENT_RE.match(part):
                raise MalformedPathError(f"bad path segment {part!r}")

    def __str__(self) -> str:
        return ".".join((self.resource, *self.segments))

    @classmethod
    def parse(cls, text: str) -> "ElementPath":
        parts = text.split(".")
        if len(parts) < 2:
            raise MalformedPathError(f"{text!r} is not a dotted element path")
        return cls(parts[0], tuple(parts[1:]))


@dataclass(frozen=True)
class AttributeMapping:
    """Ranked candidates (paths or placeholders) for one source attribute."""

    attribute: str
    candidates: tuple[str, ...]
    low_confidence: bool = False

    def __post_init__(self):
        if len(self.candidates) > MAX_CANDIDATES:
            raise MappingFormatError(
                "candidates", f"attribute {self.attribute!r} has more than {MAX_CANDIDATES}"
            )
        real = [c for c in self.candidates if c != PLACEHOLDER]
        if len(set(real)) != len(real):
            raise MappingFormatError(
                "candidates", f"attribute {self.attribute!r} repeats a candidate path"
            )


@dataclass(frozen=True)
class Provenance:
    strategy: str = ""
    run_id: str = ""
    provider: str = ""
    query_id: str = ""
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MappingDocument:
    mappings: tuple[AttributeMapping, ...]
    provenance: Provenance | None = None

    def by_attribute(self) -> dict[str, AttributeMapping]:
        return {m.attribute: m for m in self.mappings}


@dataclass(frozen=True)
class ValidationIssue:
    attribute: str
    path: str
    kind: str  # one of ISSUE_KINDS
    message: str


def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        text = re.sub(r"^```[a-zA-Z]*\n", "", text)
        text = re.sub(r"\n?```$", "", text)
    return text


def _loads(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MappingParseError(f"response is not valid JSON: {exc.msg}", offset=exc.pos) from exc


def parse_mapping_response(response, expected_attributes=None) -> MappingDocument:
    """Strictly parse a chat response (text or tool-call payload) into a document.

    ``expected_attributes``, when given, appends an empty (unmapped) entry for
    each attribute the response failed to mention.  Structural violations
    raise :class:`MappingFormatError` naming the offending field.
    """
    tool_call = getattr(response, "tool_call", None)
    if tool_call is not None:
        args = tool_call.get("arguments")
        if isinstance(args, str):
            payload = _loads(args)
        elif isinstance(args, dict):
            payload = args
        else:
            raise MappingFormatError("tool_call.arguments", "expected an object or JSON string")
    else:
        text = getattr(response, "text", None)
        if not text:
            raise MappingParseError("empty response", offset=0)
        payload = _loads(_strip_fences(text))

    if not isinstance(payload, dict) or "mappings" not in payload:
        raise MappingFormatError("mappings", "missing from response object")
    raw = payload["mappings"]
    if not isinstance(raw, list):
        raise MappingFormatError("mappings", "must be a list")

    mappings: list[AttributeMapping] = []
    seen: set[str] = set()
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise MappingFormatError(f"mappings[{i}]", "must be an object")
        name = item.get("attribute")
        if not isinstance(name, str) or not name:
            raise MappingFormatError(f"mappings[{i}].attribute", "must be a non-empty string")
        if name in seen:
            raise MappingFormatError(f"mappings[{i}].attribute", f"{name!r} appears twice")
        seen.add(name)
        cands = item.get("candidates")
        if not isinstance(cands, list) or not all(isinstance(c, str) for c in cands):
            raise MappingFormatError(f"mappings[{i}].candidates", "must be a list of strings")
        if len(cands) > MAX_CANDIDATES:
            raise MappingFormatError(
                f"mappings[{i}].candidates", f"at most {MAX_CANDIDATES} entries allowed"
            )
        mappings.append(AttributeMapping(name, tuple(cands)))

    if expected_attributes:
        for name in expected_attributes:
            if name not in seen:
                mappings.append(AttributeMapping(name, ()))
    return MappingDocument(tuple(mappings))


def serialize_mapping(doc: MappingDocument) -> dict:
    """Inverse of parse: parse(serialize(doc)) preserves attributes and candidates."""
    return {
        "mappings": [
            {"attribute": m.attribute, "candidates": list(m.candidates)} for m in doc.mappings
        ]
    }


def validate_mapping(doc: MappingDocument, corpus: list[FhirResourceDoc]) -> list[ValidationIssue]:
    """Check every candidate against the corpus element indexes.

    Placeholders yield informational issues; for a document with n candidates,
    issues + grounded candidates = n.  A zero-issue document references only
    paths that the element index derivation can produce.
    """
    index = {r.resource_name: r.element_index for r in corpus}
    issues: list[ValidationIssue] = []
    for m in doc.mappings:
        for cand in m.candidates:
            if cand == PLACEHOLDER:
                issues.append(
                    ValidationIssue(m.attribute, cand, "placeholder", "unused candidate slot")
                )
                continue
            try:
                path = ElementPath.parse(cand)
            except MalformedPathError as exc:
                issues.append(ValidationIssue(m.attribute, cand, "malformed", str(exc)))
                continue
            if path.resource not in index:
                issues.append(
                    ValidationIssue(
                        m.attribute, cand, "unknown_resource",
                        f"resource {path.resource!r} is not in the corpus",
                    )
                )
            elif cand not in index[path.resource]:
                issues.append(
                    ValidationIssue(
                        m.attribute, cand, "unknown_element",
                        f"{cand!r} does not exist on {path.resource}",
                    )
                )
    return issues
