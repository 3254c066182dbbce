"""Metadata schemas and the numeric codec for acquisition/patient metadata.

A schema declares an ordered list of entities (categorical or continuous)
together with their encoding rules: categorical labels map to fixed real
codes, continuous values are divided by a per-entity scale divisor.
Schemas are data, not code; the ones shipped under ``cardioseg/schemas``
use the line-oriented text format parsed by :func:`schema_from_text`.
"""

from __future__ import annotations

import csv
import hashlib
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import (
    DecodingError,
    EncodingError,
    MissingMetadataError,
    SchemaError,
)

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class _Absent:
    """Singleton marker for a metadata entity missing at inference time."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ABSENT"


#: Explicit marker for a missing entity value. Never silently defaulted;
#: encoding a record containing it raises MissingMetadataError.
ABSENT = _Absent()

MetadataValue = Union[str, float, int, _Absent]


@dataclass(frozen=True)
class MetadataEntitySpec:
    """Declaration of one metadata entity and its encoding rule.

    Categorical entities carry an ordered label list and a label->code map;
    continuous entities carry a positive scale divisor (1.0 means the raw
    value is used directly).
    """

    name: str
    kind: str  # "categorical" | "continuous"
    categories: tuple[str, ...] = ()
    category_codes: Mapping[str, float] = field(default_factory=dict)
    scale_divisor: float = 1.0

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise SchemaError(f"entity name {self.name!r} is not an identifier")
        if self.kind == "categorical":
            if not self.categories:
                raise SchemaError(f"categorical entity {self.name!r} has no categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"entity {self.name!r} has duplicate categories")
            codes = dict(self.category_codes)
            if not codes:
                # 1-based consecutive integers in declaration order.
                codes = {label: float(i + 1) for i, label in enumerate(self.categories)}
            if set(codes) != set(self.categories):
                raise SchemaError(
                    f"entity {self.name!r}: category_codes keys must equal categories"
                )
            values = [float(v) for v in codes.values()]
            if len(set(values)) != len(values):
                raise SchemaError(f"entity {self.name!r}: category codes must be distinct")
            object.__setattr__(self, "categories", tuple(self.categories))
            object.__setattr__(self, "category_codes", {k: float(v) for k, v in codes.items()})
        elif self.kind == "continuous":
            if self.categories or self.category_codes:
                raise SchemaError(f"continuous entity {self.name!r} cannot have categories")
            if not (self.scale_divisor > 0) or not math.isfinite(self.scale_divisor):
                raise SchemaError(f"entity {self.name!r}: scale_divisor must be positive")
        else:
            raise SchemaError(f"entity {self.name!r}: unknown kind {self.kind!r}")

    @property
    def num_outputs(self) -> int:
        """Width of this entity's prediction head."""
        return len(self.categories) if self.kind == "categorical" else 1

    def encode(self, value: MetadataValue) -> float:
        if value is ABSENT:
            raise MissingMetadataError(
                f"entity {self.name!r} is absent; complete the record or use "
                f"ensemble inference (cardioseg ensemble-infer) for a missing "
                f"categorical entity"
            )
        if self.kind == "categorical":
            if not isinstance(value, str):
                raise EncodingError(
                    f"entity {self.name!r} expects a category label, got {value!r}"
                )
            if value not in self.category_codes:
                raise EncodingError(
                    f"label {value!r} not in categories of entity {self.name!r}"
                )
            return self.category_codes[value]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise EncodingError(f"entity {self.name!r} expects a real number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise EncodingError(f"entity {self.name!r}: non-finite value {value!r}")
        return value / self.scale_divisor

    def decode(self, outputs: np.ndarray) -> MetadataValue:
        outputs = np.asarray(outputs, dtype=np.float64).reshape(-1)
        if outputs.shape[0] != self.num_outputs:
            raise DecodingError(
                f"entity {self.name!r} expects {self.num_outputs} outputs, "
                f"got {outputs.shape[0]}"
            )
        if self.kind == "categorical":
            # np.argmax breaks ties toward the lowest category index.
            return self.categories[int(np.argmax(outputs))]
        return float(outputs[0]) * self.scale_divisor


@dataclass(frozen=True)
class MetadataSchema:
    """Ordered collection of entity specs for one dataset."""

    dataset_name: str
    entities: tuple[MetadataEntitySpec, ...]

    def __post_init__(self):
        if not _NAME_RE.match(self.dataset_name):
            raise SchemaError(f"dataset name {self.dataset_name!r} is not an identifier")
        object.__setattr__(self, "entities", tuple(self.entities))
        names = [e.name for e in self.entities]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate entity names in schema {self.dataset_name!r}")

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def entity_names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entities)

    def entity(self, name: str) -> MetadataEntitySpec:
        for e in self.entities:
            if e.name == name:
                return e
        raise SchemaError(f"schema {self.dataset_name!r} has no entity {name!r}")

    def without(self, name: str) -> "MetadataSchema":
        """Schema with one entity removed (ablation arms)."""
        self.entity(name)
        return MetadataSchema(
            dataset_name=self.dataset_name,
            entities=tuple(e for e in self.entities if e.name != name),
        )

    def to_text(self) -> str:
        """Canonical serialization; also the on-disk schema file format."""
        lines = [f"dataset: {self.dataset_name}", ""]
        for e in self.entities:
            lines.append(f"entity: {e.name}")
            lines.append(f"kind: {e.kind}")
            if e.kind == "categorical":
                for label in e.categories:
                    code = e.category_codes[label]
                    lines.append(f"category: {label} = {code:g}")
            else:
                lines.append(f"divisor: {e.scale_divisor:g}")
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"

    def fingerprint(self) -> str:
        """Stable digest of the canonical serialization."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MetadataRecord:
    """Raw metadata values for one case, keyed by entity name."""

    values: Mapping[str, MetadataValue]

    def __post_init__(self):
        object.__setattr__(self, "values", dict(self.values))

    def get(self, name: str) -> MetadataValue:
        return self.values[name]

    def validate(self, schema: MetadataSchema) -> None:
        """Check keys belong to the schema and categorical labels are known."""
        for name, value in self.values.items():
            entity = schema.entity(name)  # raises SchemaError on unknown name
            if value is ABSENT:
                continue
            if entity.kind == "categorical" and value not in entity.categories:
                raise EncodingError(
                    f"label {value!r} not in categories of entity {name!r}"
                )

    def restricted_to(self, schema: MetadataSchema) -> "MetadataRecord":
        """Drop values whose entity is not declared by ``schema``."""
        keep = set(schema.entity_names)
        return MetadataRecord({k: v for k, v in self.values.items() if k in keep})

    def replace(self, name: str, value: MetadataValue) -> "MetadataRecord":
        new = dict(self.values)
        new[name] = value
        return MetadataRecord(new)

    def absent_entities(self, schema: MetadataSchema) -> tuple[str, ...]:
        """Names of schema entities missing or explicitly absent here."""
        out = []
        for e in schema.entities:
            if e.name not in self.values or self.values[e.name] is ABSENT:
                out.append(e.name)
        return tuple(out)


def encode_metadata(record: MetadataRecord, schema: MetadataSchema) -> np.ndarray:
    """Encode a complete record into a flat float64 vector, one slot per entity."""
    for name in record.values:
        schema.entity(name)
    out = np.empty(len(schema), dtype=np.float64)
    for i, entity in enumerate(schema.entities):
        if entity.name not in record.values:
            raise MissingMetadataError(
                f"record lacks entity {entity.name!r}; complete the record or use "
                f"ensemble inference (cardioseg ensemble-infer) for a missing "
                f"categorical entity"
            )
        out[i] = entity.encode(record.values[entity.name])
    return out


def decode_head_outputs(
    head_outputs: Mapping[str, np.ndarray], schema: MetadataSchema
) -> dict[str, MetadataValue]:
    """Map per-entity head outputs back to labels / raw continuous values.

    Categorical heads decode by argmax (ties to the lowest category index);
    continuous heads multiply back by the scale divisor.
    """
    if set(head_outputs) != set(schema.entity_names):
        missing = set(schema.entity_names) - set(head_outputs)
        extra = set(head_outputs) - set(schema.entity_names)
        raise DecodingError(
            f"head outputs do not match schema entities "
            f"(missing={sorted(missing)}, extra={sorted(extra)})"
        )
    return {e.name: e.decode(np.asarray(head_outputs[e.name])) for e in schema.entities}


# ---------------------------------------------------------------------------
# Schema file format (line-oriented text)
# ---------------------------------------------------------------------------

def schema_from_text(text: str) -> MetadataSchema:
    """Parse the line-oriented schema format produced by ``to_text``.

    Blank lines and ``#`` comments are ignored. A file holds one
    ``dataset:`` header followed by ``entity:`` blocks; each block declares
    ``kind:`` and either ``category: LABEL = CODE`` lines or ``divisor:``.
    """
    dataset_name = None
    entities: list[MetadataEntitySpec] = []
    current: dict | None = None

    def flush():
        nonlocal current
        if current is None:
            return
        if current.get("kind") is None:
            raise SchemaError(f"entity {current['name']!r}: missing kind")
        entities.append(
            MetadataEntitySpec(
                name=current["name"],
                kind=current["kind"],
                categories=tuple(current["categories"]),
                category_codes=dict(current["codes"]),
                scale_divisor=current["divisor"],
            )
        )
        current = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise SchemaError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = (part.strip() for part in line.split(":", 1))
        if key == "dataset":
            if dataset_name is not None:
                raise SchemaError(f"line {lineno}: duplicate dataset header")
            dataset_name = value
        elif key == "entity":
            flush()
            current = {"name": value, "kind": None, "categories": [], "codes": {}, "divisor": 1.0}
        elif current is None:
            raise SchemaError(f"line {lineno}: {key!r} outside an entity block")
        elif key == "kind":
            current["kind"] = value
        elif key == "category":
            if "=" not in value:
                raise SchemaError(f"line {lineno}: expected 'category: LABEL = CODE'")
            label, code = (part.strip() for part in value.rsplit("=", 1))
            try:
                current["codes"][label] = float(code)
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: bad code {code!r}") from exc
            current["categories"].append(label)
        elif key == "divisor":
            try:
                current["divisor"] = float(value)
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: bad divisor {value!r}") from exc
        else:
            raise SchemaError(f"line {lineno}: unknown key {key!r}")
    flush()
    if dataset_name is None:
        raise SchemaError("schema file has no 'dataset:' header")
    return MetadataSchema(dataset_name=dataset_name, entities=tuple(entities))


def load_schema(path: str | Path) -> MetadataSchema:
    return schema_from_text(Path(path).read_text(encoding="utf-8"))


def save_schema(schema: MetadataSchema, path: str | Path) -> None:
    Path(path).write_text(schema.to_text(), encoding="utf-8")


def builtin_schema(name: str) -> MetadataSchema:
    """Load one of the schemas shipped with the package (by dataset name)."""
    ref = resources.files("cardioseg.schemas").joinpath(f"{name}.schema")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise SchemaError(f"no builtin schema named {name!r}") from exc
    return schema_from_text(text)


# ---------------------------------------------------------------------------
# CSV record ingestion
# ---------------------------------------------------------------------------

def records_from_csv(
    path: str | Path,
    schema: MetadataSchema,
    id_column: str | None = None,
) -> list[tuple[str | None, MetadataRecord]]:
    """Read records from a CSV whose header names match schema entities.

    Empty cells become the ABSENT marker. Returns (case_id, record) pairs;
    case_id is None unless ``id_column`` names an extra column.
    """
    rows: list[tuple[str | None, MetadataRecord]] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        known = set(schema.entity_names)
        for col in header:
            if col != id_column and col not in known:
                raise SchemaError(f"CSV column {col!r} not in schema {schema.dataset_name!r}")
        for row in reader:
            values: dict[str, MetadataValue] = {}
            for name in schema.entity_names:
                if name not in row or row[name] is None:
                    continue
                cell = row[name].strip()
                if cell == "":
                    values[name] = ABSENT
                elif schema.entity(name).kind == "continuous":
                    try:
                        values[name] = float(cell)
                    except ValueError as exc:
                        raise EncodingError(
                            f"entity {name!r}: cannot parse {cell!r} as a number"
                        ) from exc
                else:
                    values[name] = cell
            case_id = row.get(id_column) if id_column else None
            record = MetadataRecord(values)
            record.validate(schema)
            rows.append((case_id, record))
    return rows


def records_to_csv(
    path: str | Path,
    rows: Iterable[tuple[str, MetadataRecord]],
    schema: MetadataSchema,
    id_column: str = "case_id",
) -> None:
    """Write (case_id, record) pairs as a CSV sidecar."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([id_column, *schema.entity_names])
        for case_id, record in rows:
            cells = [case_id]
            for name in schema.entity_names:
                value = record.values.get(name, ABSENT)
                if value is ABSENT:
                    cells.append("")
                elif isinstance(value, float):
                    cells.append(f"{value:g}")
                else:
                    cells.append(str(value))
            writer.writerow(cells)
