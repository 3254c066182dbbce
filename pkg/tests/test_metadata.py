"""Metadata schema / codec tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardioseg.errors import (
    DecodingError,
    EncodingError,
    MissingMetadataError,
    SchemaError,
)
from cardioseg.metadata import (
    ABSENT,
    MetadataEntitySpec,
    MetadataRecord,
    MetadataSchema,
    builtin_schema,
    decode_head_outputs,
    encode_metadata,
    records_from_csv,
    records_to_csv,
    schema_from_text,
)


def vendor_entity():
    return MetadataEntitySpec(
        name="vendor",
        kind="categorical",
        categories=("Philips", "Siemens", "GE"),
    )


def test_vendor_codes_are_one_based_declaration_order():
    e = vendor_entity()
    assert e.category_codes == {"Philips": 1.0, "Siemens": 2.0, "GE": 3.0}


def test_encode_single_vendor():
    schema = MetadataSchema("mri", (vendor_entity(),))
    vec = encode_metadata(MetadataRecord({"vendor": "Philips"}), schema)
    assert vec.tolist() == [1.0]


def test_encode_field_strength_used_directly():
    schema = MetadataSchema(
        "mri", (MetadataEntitySpec(name="field_strength", kind="continuous", scale_divisor=1.0),)
    )
    vec = encode_metadata(MetadataRecord({"field_strength": 1.5}), schema)
    assert vec.tolist() == [1.5]


def test_encode_age_divided_by_ten():
    schema = MetadataSchema(
        "echo", (MetadataEntitySpec(name="age", kind="continuous", scale_divisor=10.0),)
    )
    vec = encode_metadata(MetadataRecord({"age": 60}), schema)
    assert vec.tolist() == [6.0]


def test_encode_sex_and_quality_zero_based_override():
    schema = MetadataSchema(
        "echo",
        (
            MetadataEntitySpec(
                name="sex",
                kind="categorical",
                categories=("Male", "Female"),
                category_codes={"Male": 0, "Female": 1},
            ),
            MetadataEntitySpec(
                name="image_quality",
                kind="categorical",
                categories=("Good", "Medium", "Poor"),
                category_codes={"Good": 0, "Medium": 1, "Poor": 2},
            ),
        ),
    )
    vec = encode_metadata(
        MetadataRecord({"sex": "Female", "image_quality": "Poor"}), schema
    )
    assert vec.tolist() == [1.0, 2.0]


def test_decode_argmax_label():
    schema = MetadataSchema("mri", (vendor_entity(),))
    out = decode_head_outputs({"vendor": np.array([0.1, 2.0, 0.3])}, schema)
    assert out == {"vendor": "Siemens"}


def test_decode_continuous_rescales():
    schema = MetadataSchema(
        "echo", (MetadataEntitySpec(name="age", kind="continuous", scale_divisor=10.0),)
    )
    out = decode_head_outputs({"age": np.array([6.0])}, schema)
    assert out == {"age": 60.0}


def test_decode_tie_breaks_to_lowest_index():
    schema = MetadataSchema(
        "echo",
        (
            MetadataEntitySpec(
                name="sex",
                kind="categorical",
                categories=("Male", "Female"),
                category_codes={"Male": 0, "Female": 1},
            ),
        ),
    )
    out = decode_head_outputs({"sex": np.array([0.0, 0.0])}, schema)
    assert out == {"sex": "Male"}


# -- error paths ------------------------------------------------------------

def test_unknown_entity_rejected():
    schema = MetadataSchema("mri", (vendor_entity(),))
    with pytest.raises(SchemaError):
        encode_metadata(MetadataRecord({"vendor": "Philips", "bogus": 1}), schema)


def test_unknown_label_rejected():
    schema = MetadataSchema("mri", (vendor_entity(),))
    with pytest.raises(EncodingError):
        encode_metadata(MetadataRecord({"vendor": "Canon"}), schema)


def test_non_finite_continuous_rejected():
    schema = MetadataSchema(
        "echo", (MetadataEntitySpec(name="age", kind="continuous", scale_divisor=10.0),)
    )
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(EncodingError):
            encode_metadata(MetadataRecord({"age": bad}), schema)


def test_absent_value_raises_missing_metadata():
    schema = MetadataSchema("mri", (vendor_entity(),))
    with pytest.raises(MissingMetadataError):
        encode_metadata(MetadataRecord({"vendor": ABSENT}), schema)


def test_missing_key_raises_missing_metadata():
    schema = MetadataSchema("mri", (vendor_entity(),))
    with pytest.raises(MissingMetadataError):
        encode_metadata(MetadataRecord({}), schema)


def test_decode_arity_mismatch():
    schema = MetadataSchema("mri", (vendor_entity(),))
    with pytest.raises(DecodingError):
        decode_head_outputs({"vendor": np.zeros(4)}, schema)
    with pytest.raises(DecodingError):
        decode_head_outputs({}, schema)


def test_duplicate_entity_names_rejected():
    with pytest.raises(SchemaError):
        MetadataSchema("mri", (vendor_entity(), vendor_entity()))


def test_bad_divisor_rejected():
    with pytest.raises(SchemaError):
        MetadataEntitySpec(name="age", kind="continuous", scale_divisor=0.0)
    with pytest.raises(SchemaError):
        MetadataEntitySpec(name="age", kind="continuous", scale_divisor=-1.0)


def test_duplicate_category_codes_rejected():
    with pytest.raises(SchemaError):
        MetadataEntitySpec(
            name="vendor",
            kind="categorical",
            categories=("Philips", "Siemens"),
            category_codes={"Philips": 1, "Siemens": 1},
        )


# -- builtin schemas ---------------------------------------------------------

def test_builtin_mnms2_schema():
    schema = builtin_schema("mnms2")
    assert schema.entity_names == ("vendor", "scanner", "field_strength", "disease")
    assert schema.entity("vendor").category_codes["GE"] == 3.0
    assert schema.entity("disease").categories == ("NOR", "HCM", "ARR", "FALL", "CIA", "DLV")
    assert schema.entity("field_strength").scale_divisor == 1.0
    assert len(schema.entity("scanner").categories) == 9


def test_builtin_camus_schema():
    schema = builtin_schema("camus")
    assert len(schema) == 8
    assert schema.entity("sex").category_codes == {"Male": 0.0, "Female": 1.0}
    assert schema.entity("image_quality").category_codes == {
        "Good": 0.0,
        "Medium": 1.0,
        "Poor": 2.0,
    }
    for name in ("es_frame", "ed_frame", "nb_frame", "age", "ef", "frame_rate"):
        assert schema.entity(name).scale_divisor == 10.0


def test_builtin_unknown_name():
    with pytest.raises(SchemaError):
        builtin_schema("nope")


def test_schema_text_round_trip():
    schema = builtin_schema("mnms2")
    again = schema_from_text(schema.to_text())
    assert again == schema
    assert again.fingerprint() == schema.fingerprint()


def test_schema_without_entity():
    schema = builtin_schema("synthetic")
    reduced = schema.without("disease")
    assert reduced.entity_names == ("vendor", "field_strength")
    assert reduced.fingerprint() != schema.fingerprint()
    with pytest.raises(SchemaError):
        schema.without("nope")


def test_schema_parse_errors():
    with pytest.raises(SchemaError):
        schema_from_text("entity: x\nkind: categorical\n")  # no dataset header
    with pytest.raises(SchemaError):
        schema_from_text("dataset: d\nkind: categorical\n")  # kind outside block
    with pytest.raises(SchemaError):
        schema_from_text("dataset: d\nentity: x\nkind: continuous\ndivisor: abc\n")
    with pytest.raises(SchemaError):
        schema_from_text("dataset: d\nentity: x\nkind: weird\n")


# -- CSV ingestion ------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    schema = builtin_schema("synthetic")
    rows = [
        ("case_000", MetadataRecord({"vendor": "VendorA", "disease": "NOR", "field_strength": 1.5})),
        ("case_001", MetadataRecord({"vendor": "VendorB", "disease": ABSENT, "field_strength": 3.0})),
    ]
    path = tmp_path / "metadata.csv"
    records_to_csv(path, rows, schema)
    back = records_from_csv(path, schema, id_column="case_id")
    assert [cid for cid, _ in back] == ["case_000", "case_001"]
    assert back[0][1].values == rows[0][1].values
    assert back[1][1].get("disease") is ABSENT
    assert back[1][1].get("field_strength") == 3.0


def test_csv_unknown_column_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("case_id,vendor,oops\nc0,VendorA,1\n")
    with pytest.raises(SchemaError):
        records_from_csv(path, builtin_schema("synthetic"), id_column="case_id")


def test_absent_entities_listing():
    schema = builtin_schema("synthetic")
    rec = MetadataRecord({"vendor": ABSENT, "field_strength": 1.5})
    assert rec.absent_entities(schema) == ("vendor", "disease")


# -- properties ---------------------------------------------------------------

labels = st.lists(
    st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8),
    min_size=1,
    max_size=6,
    unique=True,
)


@given(labels=labels, pick=st.data())
@settings(max_examples=50, deadline=None)
def test_categorical_round_trip(labels, pick):
    entity = MetadataEntitySpec(name="e", kind="categorical", categories=tuple(labels))
    schema = MetadataSchema("d", (entity,))
    label = pick.draw(st.sampled_from(labels))
    code = encode_metadata(MetadataRecord({"e": label}), schema)[0]
    # one-hot at the encoded class decodes back to the same label
    onehot = np.zeros(len(labels))
    onehot[int(code) - 1] = 1.0
    assert decode_head_outputs({"e": onehot}, schema)["e"] == label


@given(
    value=st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6),
    divisor=st.floats(min_value=0.1, max_value=100.0),
)
@settings(max_examples=100, deadline=None)
def test_continuous_round_trip(value, divisor):
    entity = MetadataEntitySpec(name="v", kind="continuous", scale_divisor=divisor)
    schema = MetadataSchema("d", (entity,))
    encoded = encode_metadata(MetadataRecord({"v": value}), schema)
    decoded = decode_head_outputs({"v": encoded}, schema)["v"]
    assert decoded == pytest.approx(value, rel=1e-12, abs=1e-12)


@given(labels=labels)
@settings(max_examples=50, deadline=None)
def test_categorical_codes_injective(labels):
    entity = MetadataEntitySpec(name="e", kind="categorical", categories=tuple(labels))
    schema = MetadataSchema("d", (entity,))
    codes = [encode_metadata(MetadataRecord({"e": lab}), schema)[0] for lab in labels]
    assert len(set(codes)) == len(labels)


def test_vector_length_is_schema_determined():
    schema = builtin_schema("camus")
    rec = MetadataRecord(
        {
            "es_frame": 1,
            "ed_frame": 2,
            "nb_frame": 3,
            "sex": "Male",
            "age": 4,
            "image_quality": "Good",
            "ef": 5,
            "frame_rate": 6,
        }
    )
    assert encode_metadata(rec, schema).shape == (8,)
