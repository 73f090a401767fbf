import json

import pytest

from fhirmap.ingest import (
    AttributeCluster,
    AttributeDescriptor,
    CorpusError,
    CyclicSchemaError,
    DatasetError,
    FhirResourceDoc,
    TableDescriptor,
    build_element_index,
    canonicalize,
    load_dataset_descriptor,
    load_fhir_corpus,
    serialize_dataset,
)


def write_dataset(tmp_path, payload, name="dataset.json"):
    p = tmp_path / name
    p.write_text(json.dumps(payload))
    return p


MINI = {
    "tables": [
        {
            "id": "outputevents",
            "name": "Outputevents",
            "description": "Fluid output events for patients",
            "use_case": "Track urine and drain output volumes",
            "attributes": [
                {"name": "subject_id", "description": "patient identifier"},
                {"name": "value", "description": "amount of fluid output", "example_values": ["25"]},
            ],
        }
    ]
}


def test_load_simple_dataset(tmp_path):
    tables = load_dataset_descriptor(write_dataset(tmp_path, MINI))
    assert len(tables) == 1
    t = tables[0]
    assert t.id == "outputevents"
    assert [a.name for a in t.attributes] == ["subject_id", "value"]
    assert t.attributes[1].example_values == ("25",)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_dataset_descriptor(tmp_path / "nope.json")


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"tables": [\n  {"id": }\n]}')
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset_descriptor(p)


def test_empty_attribute_list_rejected(tmp_path):
    payload = {"tables": [{"id": "t1", "attributes": []}]}
    with pytest.raises(DatasetError, match="has no attributes"):
        load_dataset_descriptor(write_dataset(tmp_path, payload))


def test_duplicate_table_ids_named(tmp_path):
    table = MINI["tables"][0]
    payload = {"tables": [table, table]}
    with pytest.raises(DatasetError, match="outputevents"):
        load_dataset_descriptor(write_dataset(tmp_path, payload))


def test_duplicate_attribute_names_named():
    attr = AttributeDescriptor("value", "the value")
    with pytest.raises(DatasetError, match="value"):
        TableDescriptor(id="t", name="t", attributes=(attr, attr))


def test_attribute_needs_description_or_example():
    with pytest.raises(DatasetError):
        AttributeDescriptor("bare")
    # but an example value alone is enough
    AttributeDescriptor("bare", example_values=("25ml",))


def test_round_trip(tmp_path):
    tables = load_dataset_descriptor(write_dataset(tmp_path, MINI))
    p = tmp_path / "again.json"
    p.write_text(json.dumps(serialize_dataset(tables)))
    assert load_dataset_descriptor(p) == tables


def test_realworld_single_table_with_null_source(tmp_path):
    payload = {
        "tables": [
            {
                "id": "unified",
                "attributes": [
                    {"name": "heartrate", "description": "beats per minute", "source_table": None}
                ],
            }
        ]
    }
    tables = load_dataset_descriptor(write_dataset(tmp_path, payload))
    assert tables[0].attributes[0].source_table is None


# ---------------------------------------------------------------------------
# element indexes


def rdoc(name, schema):
    return FhirResourceDoc(name, "desc", schema)


def test_flat_schema_paths():
    idx = build_element_index(rdoc("R", {"type": "object", "properties": {
        "status": {"type": "string"}, "code": {"type": "string"}}}))
    assert idx == {"R.status", "R.code"}


def test_nested_object_paths():
    schema = {
        "type": "object",
        "properties": {
            "valueQuantity": {
                "type": "object",
                "properties": {"value": {"type": "number"}, "unit": {"type": "string"}},
            }
        },
    }
    idx = build_element_index(rdoc("R", schema))
    assert "R.valueQuantity.value" in idx
    assert "R.valueQuantity" in idx


def test_choice_type_expansion():
    schema = {
        "type": "object",
        "properties": {
            "value[x]": {
                "types": {
                    "Quantity": {"type": "object", "properties": {"value": {"type": "number"}}},
                    "string": {"type": "string"},
                }
            }
        },
    }
    idx = build_element_index(rdoc("R", schema))
    assert "R.valueQuantity" in idx
    assert "R.valueString" in idx
    assert "R.valueQuantity.value" in idx
    assert "R.value[x]" not in idx


def test_array_items_traversed():
    schema = {
        "type": "object",
        "properties": {
            "identifier": {
                "type": "array",
                "items": {"type": "object", "properties": {"system": {"type": "string"}}},
            }
        },
    }
    idx = build_element_index(rdoc("R", schema))
    assert {"R.identifier", "R.identifier.system"} <= idx


def test_index_is_prefix_closed():
    schema = {
        "type": "object",
        "properties": {
            "a": {"type": "object", "properties": {
                "b": {"type": "object", "properties": {"c": {"type": "string"}}}}}
        },
    }
    idx = build_element_index(rdoc("R", schema))
    for path in idx:
        parts = path.split(".")
        for i in range(2, len(parts)):
            assert ".".join(parts[:i]) in idx


def test_depth_cap_truncates_with_warning():
    leaf = {"type": "string"}
    node = leaf
    for name in ("e", "d", "c", "b", "a"):
        node = {"type": "object", "properties": {name: node}}
    with pytest.warns(UserWarning, match="truncated"):
        idx = build_element_index(rdoc("R", node))
    assert "R.a.b.c.d" in idx
    assert "R.a.b.c.d.e" not in idx


def test_cyclic_reference_detected():
    schema = {
        "type": "object",
        "properties": {"self": {"$ref": "#/definitions/Loop"}},
        "definitions": {
            "Loop": {"type": "object", "properties": {"again": {"$ref": "#/definitions/Loop"}}}
        },
    }
    with pytest.raises(CyclicSchemaError, match="definitions/Loop"):
        build_element_index(rdoc("R", schema))


def test_acyclic_reference_resolved():
    schema = {
        "type": "object",
        "properties": {"qty": {"$ref": "#/definitions/Quantity"}},
        "definitions": {
            "Quantity": {"type": "object", "properties": {"value": {"type": "number"}}}
        },
    }
    idx = build_element_index(rdoc("R", schema))
    assert {"R.qty", "R.qty.value"} <= idx


# ---------------------------------------------------------------------------
# corpus loading


def write_resource(tmp_path, name, schema, description="a resource"):
    (tmp_path / f"{name}.description.txt").write_text(description)
    (tmp_path / f"{name}.schema.json").write_text(json.dumps(schema))


FLAT = {"type": "object", "properties": {"status": {"type": "string"}}}


def test_load_corpus_pairs(tmp_path):
    write_resource(tmp_path, "Observation", FLAT)
    write_resource(tmp_path, "Patient", FLAT)
    docs = load_fhir_corpus(tmp_path)
    assert [d.resource_name for d in docs] == ["Observation", "Patient"]
    assert all(d.element_index for d in docs)


def test_empty_corpus_rejected(tmp_path):
    with pytest.raises(CorpusError, match="empty corpus"):
        load_fhir_corpus(tmp_path)


def test_unpaired_files_rejected(tmp_path):
    write_resource(tmp_path, "Observation", FLAT)
    (tmp_path / "Patient.description.txt").write_text("desc without schema")
    with pytest.raises(CorpusError, match="Patient"):
        load_fhir_corpus(tmp_path)


def test_malformed_schema_names_resource(tmp_path):
    (tmp_path / "Broken.description.txt").write_text("desc")
    (tmp_path / "Broken.schema.json").write_text("{not json")
    with pytest.raises(CorpusError, match="Broken"):
        load_fhir_corpus(tmp_path)


# ---------------------------------------------------------------------------
# canonicalization


def test_canonical_table_order():
    t = TableDescriptor(
        id="outputevents",
        name="Outputevents",
        description="Fluid output",
        use_case="Charting",
        attributes=(AttributeDescriptor("value", "output amount", ("25ml",)),),
    )
    doc = canonicalize(t)
    assert doc.kind == "table"
    assert doc.text == "outputevents fluid output charting value output amount 25ml"


def test_canonical_attribute_without_description_keeps_examples():
    a = AttributeDescriptor("valueuom", "", ("25ml",))
    doc = canonicalize(a)
    assert "25ml" in doc.text


def test_canonicalize_is_pure():
    a = AttributeDescriptor("heartrate", "Beats per minute", ("72", "88"), source_table="vitals")
    assert canonicalize(a) == canonicalize(a)
    assert canonicalize(a).doc_id == "vitals.heartrate"


def test_canonical_cluster_concatenates_members():
    cluster = AttributeCluster(
        3,
        (
            AttributeDescriptor("heartrate", "beats per minute"),
            AttributeDescriptor("resprate", "breaths per minute"),
        ),
    )
    doc = canonicalize(cluster)
    assert doc.doc_id == "cluster_3"
    assert doc.text == "heartrate resprate beats per minute breaths per minute"


def test_canonical_resource():
    doc = canonicalize(FhirResourceDoc("Observation", "Measurements and simple assertions", FLAT))
    assert doc.doc_id == "Observation"
    assert doc.text.startswith("observation measurements")
