"""Loading and canonicalization of source table descriptors and the FHIR resource corpus.

A dataset descriptor is a single JSON file::

    {"tables": [{"id", "name", "description", "use_case",
                 "attributes": [{"name", "description", "example_values": [...]}]}]}

The FHIR corpus is a directory of ``<Resource>.description.txt`` /
``<Resource>.schema.json`` pairs.  Schemas are plain JSON schemas (``type`` /
``properties`` / ``items``), with one convention for FHIR choice elements: a
property named ``value[x]`` carries a ``types`` mapping from type name to the
sub-schema of that variant, and expands to ``valueQuantity``, ``valueString``,
and so on.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


class DatasetError(ValueError):
    """Raised when a dataset descriptor is missing, malformed, or inconsistent."""


class CorpusError(ValueError):
    """Raised when the FHIR corpus directory is missing files or has bad schemas."""


class CyclicSchemaError(CorpusError):
    """Raised when schema $ref resolution revisits a reference already on the stack."""


# Paths deeper than this (dotted segments, resource name included) are truncated.
MAX_PATH_DEPTH = 5


def bundled_fixture(name: str) -> Path:
    """Path of a bundled fixture file or directory (e.g. ``baseline_dataset.json``,
    ``fhir_corpus``)."""
    return Path(str(resources.files("fhirmap.fixtures").joinpath(name)))


@dataclass(frozen=True)
class AttributeDescriptor:
    """One column of a source table, with its human description and sample values."""

    name: str
    description: str = ""
    example_values: tuple[str, ...] = ()
    source_table: str | None = None

    def __post_init__(self):
        if not self.name:
            raise DatasetError("attribute name must be non-empty")
        if not self.description and not self.example_values:
            raise DatasetError(
                f"attribute {self.name!r} needs a description or at least one example value"
            )


@dataclass(frozen=True)
class TableDescriptor:
    """A source table: id, display name, free-text context, and its attributes."""

    id: str
    name: str
    description: str = ""
    use_case: str = ""
    attributes: tuple[AttributeDescriptor, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise DatasetError("table id must be non-empty")
        if not self.attributes:
            raise DatasetError(f"table {self.id!r} has no attributes")
        seen: dict[str, int] = {}
        for attr in self.attributes:
            seen[attr.name] = seen.get(attr.name, 0) + 1
        dupes = sorted(n for n, c in seen.items() if c > 1)
        if dupes:
            raise DatasetError(f"table {self.id!r} has duplicate attributes: {', '.join(dupes)}")


@dataclass(frozen=True)
class FhirResourceDoc:
    """One FHIR resource: narrative description, JSON schema, derived element paths."""

    resource_name: str
    description: str
    schema: dict
    element_index: frozenset[str] = frozenset()

    def with_index(self) -> "FhirResourceDoc":
        return FhirResourceDoc(
            self.resource_name, self.description, self.schema, build_element_index(self)
        )


@dataclass(frozen=True)
class AttributeCluster:
    """An unsupervised grouping of attributes, used as a retrieval query."""

    label: int
    attributes: tuple[AttributeDescriptor, ...]


@dataclass(frozen=True)
class CanonicalDocument:
    """Searchable text form of a table, attribute, cluster, or resource."""

    doc_id: str
    kind: str  # table | attribute | cluster | resource
    text: str


def load_dataset_descriptor(path: str | Path) -> list[TableDescriptor]:
    """Load a dataset descriptor JSON file into validated table descriptors.

    Attribute order is preserved.  Duplicate table ids or duplicate attribute
    names within a table are rejected with the offending names listed.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset descriptor not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(
            f"dataset descriptor {path} is not valid JSON: {exc.msg} (line {exc.lineno})"
        ) from exc
    if not isinstance(raw, dict) or "tables" not in raw:
        raise DatasetError(f"dataset descriptor {path} has no 'tables' field")

    tables = []
    for entry in raw["tables"]:
        try:
            table_id = entry["id"]
            attributes = tuple(
                AttributeDescriptor(
                    name=a["name"],
                    description=a.get("description", ""),
                    example_values=tuple(str(v) for v in a.get("example_values", [])),
                    source_table=a.get("source_table", table_id),
                )
                for a in entry["attributes"]
            )
            tables.append(
                TableDescriptor(
                    id=table_id,
                    name=entry.get("name", table_id),
                    description=entry.get("description", ""),
                    use_case=entry.get("use_case", ""),
                    attributes=attributes,
                )
            )
        except KeyError as exc:
            raise DatasetError(f"table entry missing required field {exc}") from exc

    seen: dict[str, int] = {}
    for t in tables:
        seen[t.id] = seen.get(t.id, 0) + 1
    dupes = sorted(i for i, c in seen.items() if c > 1)
    if dupes:
        raise DatasetError(f"duplicate table ids: {', '.join(dupes)}")
    return tables


def serialize_dataset(tables: list[TableDescriptor]) -> dict:
    """Inverse of :func:`load_dataset_descriptor`; load(serialize(x)) == x."""
    return {
        "tables": [
            {
                "id": t.id,
                "name": t.name,
                "description": t.description,
                "use_case": t.use_case,
                "attributes": [
                    {
                        "name": a.name,
                        "description": a.description,
                        "example_values": list(a.example_values),
                        "source_table": a.source_table,
                    }
                    for a in t.attributes
                ],
            }
            for t in tables
        ]
    }


def load_fhir_corpus(directory: str | Path) -> list[FhirResourceDoc]:
    """Load all ``<Resource>.description.txt`` / ``<Resource>.schema.json`` pairs.

    Every resource must have both files; an unpaired file is an error naming
    the resource.  Element indexes are built eagerly.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"corpus directory not found: {directory}")
    descriptions = {p.name[: -len(".description.txt")]: p for p in directory.glob("*.description.txt")}
    schemas = {p.name[: -len(".schema.json")]: p for p in directory.glob("*.schema.json")}
    if not descriptions and not schemas:
        raise CorpusError(f"empty corpus: no resource files in {directory}")
    missing_schema = sorted(set(descriptions) - set(schemas))
    missing_desc = sorted(set(schemas) - set(descriptions))
    if missing_schema or missing_desc:
        parts = []
        if missing_schema:
            parts.append(f"missing schema for: {', '.join(missing_schema)}")
        if missing_desc:
            parts.append(f"missing description for: {', '.join(missing_desc)}")
        raise CorpusError("; ".join(parts))

    docs = []
    for name in sorted(descriptions):
        try:
            schema = json.loads(schemas[name].read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusError(f"malformed schema for resource {name}: {exc.msg}") from exc
        doc = FhirResourceDoc(
            resource_name=name,
            description=descriptions[name].read_text(encoding="utf-8").strip(),
            schema=schema,
        ).with_index()
        if not doc.element_index:
            raise CorpusError(f"resource {name} has an empty element index")
        docs.append(doc)
    return docs


def _upper_camel(type_name: str) -> str:
    return type_name[0].upper() + type_name[1:] if type_name else type_name


def _resolve_ref(schema_root: dict, ref: str, chain: tuple[str, ...]) -> dict:
    if ref in chain:
        raise CyclicSchemaError(f"cyclic schema reference: {' -> '.join(chain + (ref,))}")
    node: dict = schema_root
    if not ref.startswith("#/"):
        raise CorpusError(f"unsupported schema reference {ref!r} (only local refs)")
    for part in ref[2:].split("/"):
        if not isinstance(node, dict) or part not in node:
            raise CorpusError(f"unresolvable schema reference {ref!r}")
        node = node[part]
    return node


def _walk(
    schema_root: dict,
    node: dict,
    prefix: str,
    depth: int,
    ref_chain: tuple[str, ...],
    out: set[str],
    truncated: list[str],
):
    if not isinstance(node, dict):
        return
    if "$ref" in node:
        target = _resolve_ref(schema_root, node["$ref"], ref_chain)
        _walk(schema_root, target, prefix, depth, ref_chain + (node["$ref"],), out, truncated)
        return
    if node.get("type") == "array":
        _walk(schema_root, node.get("items", {}), prefix, depth, ref_chain, out, truncated)
        return
    for prop, sub in node.get("properties", {}).items():
        if prop.endswith("[x]"):
            base = prop[:-3]
            types = sub.get("types", {}) if isinstance(sub, dict) else {}
            for type_name, type_schema in types.items():
                _emit(schema_root, type_schema, prefix, base + _upper_camel(type_name),
                      depth, ref_chain, out, truncated)
        else:
            _emit(schema_root, sub, prefix, prop, depth, ref_chain, out, truncated)


def _emit(schema_root, sub, prefix, segment, depth, ref_chain, out, truncated):
    path = f"{prefix}.{segment}"
    if depth + 1 > MAX_PATH_DEPTH:
        truncated.append(path)
        return
    out.add(path)
    _walk(schema_root, sub if isinstance(sub, dict) else {}, path, depth + 1, ref_chain, out, truncated)


def build_element_index(doc: FhirResourceDoc) -> frozenset[str]:
    """Derive every dotted element path of a resource from its JSON schema.

    The result is prefix-closed except for the bare resource name: whenever
    ``A.B.C`` is present so is ``A.B``.  Choice elements (``value[x]``) expand
    to one path per declared type.  Paths deeper than ``MAX_PATH_DEPTH``
    segments are dropped with a warning.
    """
    out: set[str] = set()
    truncated: list[str] = []
    _walk(doc.schema, doc.schema, doc.resource_name, 1, (), out, truncated)
    if truncated:
        warnings.warn(
            f"{doc.resource_name}: {len(truncated)} element path(s) deeper than "
            f"{MAX_PATH_DEPTH} segments truncated",
            stacklevel=2,
        )
    return frozenset(out)


def _norm(text: str) -> str:
    return " ".join(text.lower().split())


def canonicalize(entity) -> CanonicalDocument:
    """Flatten an entity into a deterministic, lowercased, searchable document.

    Concatenation order is fixed: name, description, use case, attribute
    names, attribute descriptions, example values.  Equal inputs always yield
    byte-identical text.
    """
    if isinstance(entity, TableDescriptor):
        parts = [entity.name, entity.description, entity.use_case]
        parts += [a.name for a in entity.attributes]
        parts += [a.description for a in entity.attributes]
        for a in entity.attributes:
            parts += list(a.example_values)
        return CanonicalDocument(entity.id, "table", _norm(" ".join(p for p in parts if p)))
    if isinstance(entity, AttributeDescriptor):
        parts = [entity.name, entity.description, *entity.example_values]
        doc_id = f"{entity.source_table}.{entity.name}" if entity.source_table else entity.name
        return CanonicalDocument(doc_id, "attribute", _norm(" ".join(p for p in parts if p)))
    if isinstance(entity, AttributeCluster):
        parts = [a.name for a in entity.attributes]
        parts += [a.description for a in entity.attributes]
        for a in entity.attributes:
            parts += list(a.example_values)
        return CanonicalDocument(
            f"cluster_{entity.label}", "cluster", _norm(" ".join(p for p in parts if p))
        )
    if isinstance(entity, FhirResourceDoc):
        return CanonicalDocument(
            entity.resource_name, "resource", _norm(f"{entity.resource_name} {entity.description}")
        )
    raise TypeError(f"cannot canonicalize {type(entity).__name__}")
