"""Entity-matching datasets: records, labeled pairs, splits, and their files.

Datasets arrive as pre-paired benchmark tables. The canonical on-disk format
is one CSV per split with columns ``id_left, id_right, label,
<attr>_left..., <attr>_right...`` plus a YAML manifest declaring the dataset
name, domain, schema, serialization rule, and split file paths.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .errors import DuplicatePairError, SchemaError

SPLIT_NAMES = ("train", "validation", "test")


class Label(str, Enum):
    MATCH = "match"
    NON_MATCH = "non-match"
    UNLABELED = "unlabeled"


class Provenance(str, Enum):
    BENCHMARK = "benchmark"
    SYNTHETIC = "synthetic"
    SELECTED = "selected"


#: Default mapping from CSV label cells to labels. Benchmark splits use 0/1;
#: the empty string only occurs in files the toolkit writes itself.
DEFAULT_LABEL_MAP: dict[str, Label] = {
    "1": Label.MATCH,
    "0": Label.NON_MATCH,
    "": Label.UNLABELED,
}


@dataclass(frozen=True)
class EntityRecord:
    """A single entity description: an id plus an ordered attribute map."""

    id: str
    attributes: Mapping[str, str]

    def __post_init__(self) -> None:
        if not self.id:
            raise SchemaError("entity record id must be non-empty")
        object.__setattr__(self, "attributes", dict(self.attributes))


@dataclass(frozen=True)
class SerializationRule:
    """How a record becomes one string: a single attribute, or a delimited concat."""

    attributes: tuple[str, ...]
    delimiter: str = "; "

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not self.attributes:
            raise SchemaError("serialization rule needs at least one attribute")
        if len(set(self.attributes)) != len(self.attributes):
            raise SchemaError("serialization rule attributes must be unique")
        if any(not a for a in self.attributes):
            raise SchemaError("serialization rule attribute names must be non-empty")
        if len(self.attributes) > 1 and not self.delimiter:
            raise SchemaError("concat serialization requires a non-empty delimiter")

    @property
    def mode(self) -> str:
        return "single" if len(self.attributes) == 1 else "concat"

    @classmethod
    def single(cls, attribute: str) -> "SerializationRule":
        return cls(attributes=(attribute,))

    @classmethod
    def concat(cls, attributes: Sequence[str], delimiter: str = "; ") -> "SerializationRule":
        return cls(attributes=tuple(attributes), delimiter=delimiter)

    def to_mapping(self) -> dict:
        if self.mode == "single":
            return {"mode": "single", "attribute": self.attributes[0]}
        return {"mode": "concat", "attributes": list(self.attributes), "delimiter": self.delimiter}

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SerializationRule":
        mode = data.get("mode")
        if mode == "single":
            return cls.single(str(data["attribute"]))
        if mode == "concat":
            return cls.concat([str(a) for a in data["attributes"]], str(data.get("delimiter", "; ")))
        raise SchemaError(f"unknown serialization mode: {mode!r}")


def serialize_entity(record: EntityRecord, rule: SerializationRule) -> str:
    """Serialize a record under a rule.

    Missing attribute *values* are allowed and stay as empty strings between
    delimiters, so field positions remain stable. An attribute that is absent
    from the record entirely is a schema error.
    """
    values = []
    for name in rule.attributes:
        if name not in record.attributes:
            raise SchemaError(f"attribute {name!r} absent from record {record.id!r}")
        values.append(record.attributes[name])
    return rule.delimiter.join(values) if len(values) > 1 else values[0]


@dataclass(frozen=True)
class CandidatePair:
    """A labeled (or unlabeled) pair of entity descriptions."""

    left: EntityRecord
    right: EntityRecord
    label: Label
    provenance: Provenance = Provenance.BENCHMARK

    def __post_init__(self) -> None:
        if not self.left.id or not self.right.id:
            raise SchemaError("pair record ids must be non-empty")

    @property
    def id_pair(self) -> tuple[str, str]:
        return (self.left.id, self.right.id)


@dataclass(frozen=True)
class SplitStats:
    """Per-split label counts; unlabeled and empty-serialization pairs tallied separately."""

    pos: int
    neg: int
    unlabeled: int = 0
    empty_sides: int = 0

    def __post_init__(self) -> None:
        if min(self.pos, self.neg, self.unlabeled, self.empty_sides) < 0:
            raise SchemaError("split stats counts must be non-negative")

    @property
    def total(self) -> int:
        return self.pos + self.neg

    @property
    def size(self) -> int:
        return self.pos + self.neg + self.unlabeled


@dataclass(frozen=True)
class Dataset:
    """A named collection of pair splits sharing one schema and serialization rule."""

    name: str
    domain: str
    schema: tuple[str, ...]
    serialization: SerializationRule
    splits: Mapping[str, tuple[CandidatePair, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.name:
            raise SchemaError("dataset name must be non-empty")
        object.__setattr__(self, "schema", tuple(self.schema))
        schema_set = set(self.schema)
        if len(schema_set) != len(self.schema):
            raise SchemaError(f"dataset {self.name!r}: schema attribute names must be unique")
        for attr in self.serialization.attributes:
            if attr not in schema_set:
                raise SchemaError(
                    f"dataset {self.name!r}: serialization references unknown attribute {attr!r}"
                )
        splits = {k: tuple(v) for k, v in self.splits.items()}
        object.__setattr__(self, "splits", splits)
        for split, pairs in splits.items():
            if split not in SPLIT_NAMES:
                raise SchemaError(f"dataset {self.name!r}: unknown split name {split!r}")
            seen: set[tuple[str, str]] = set()
            for pair in pairs:
                for record in (pair.left, pair.right):
                    unknown = set(record.attributes) - schema_set
                    if unknown:
                        raise SchemaError(
                            f"dataset {self.name!r}/{split}: record {record.id!r} has "
                            f"attributes outside the schema: {sorted(unknown)}"
                        )
                if pair.id_pair in seen:
                    raise DuplicatePairError(
                        f"dataset {self.name!r}/{split}: duplicate pair {pair.id_pair}"
                    )
                seen.add(pair.id_pair)

    def split(self, name: str) -> tuple[CandidatePair, ...]:
        try:
            return self.splits[name]
        except KeyError:
            raise SchemaError(f"dataset {self.name!r} has no {name!r} split") from None

    def with_split(self, name: str, pairs: Sequence[CandidatePair]) -> "Dataset":
        splits = dict(self.splits)
        splits[name] = tuple(pairs)
        return replace(self, splits=splits)


def dataset_stats(dataset: Dataset) -> dict[str, SplitStats]:
    """Exact per-split counts; unlabeled pairs are excluded from pos/neg."""
    out: dict[str, SplitStats] = {}
    for split, pairs in dataset.splits.items():
        pos = neg = unlabeled = empty = 0
        for pair in pairs:
            if pair.label is Label.MATCH:
                pos += 1
            elif pair.label is Label.NON_MATCH:
                neg += 1
            else:
                unlabeled += 1
            if not serialize_entity(pair.left, dataset.serialization).strip() or not serialize_entity(
                pair.right, dataset.serialization
            ).strip():
                empty += 1
        out[split] = SplitStats(pos=pos, neg=neg, unlabeled=unlabeled, empty_sides=empty)
    return out


def combine_datasets(
    seed: Dataset, addition: Sequence[CandidatePair], dedup: bool = True
) -> Dataset:
    """Union the seed's train split with additional pairs.

    With ``dedup``, pairs whose serialized (left, right, label) triple is
    already present are silently dropped; synthetic pipelines legitimately
    regenerate seeds, so this is not an error (unlike ingest duplicates).
    """
    rule = seed.serialization
    schema_set = set(seed.schema)
    for pair in addition:
        for record in (pair.left, pair.right):
            unknown = set(record.attributes) - schema_set
            if unknown:
                raise SchemaError(
                    f"addition pair {pair.id_pair} does not conform to schema of "
                    f"{seed.name!r}: unknown attributes {sorted(unknown)}"
                )

    def key(pair: CandidatePair) -> tuple[str, str, str]:
        return (
            serialize_entity(pair.left, rule),
            serialize_entity(pair.right, rule),
            pair.label.value,
        )

    train = list(seed.splits.get("train", ()))
    if dedup:
        seen = {key(p) for p in train}
        for pair in addition:
            k = key(pair)
            if k in seen:
                continue
            seen.add(k)
            train.append(pair)
    else:
        train.extend(addition)
    return seed.with_split("train", train)


# ---------------------------------------------------------------------------
# Canonical pair files and dataset manifests
# ---------------------------------------------------------------------------


def _pair_columns(schema: Sequence[str]) -> list[str]:
    cols = ["id_left", "id_right", "label"]
    cols += [f"{a}_left" for a in schema]
    cols += [f"{a}_right" for a in schema]
    return cols


def load_pair_file(
    path: str | Path,
    schema: Sequence[str],
    label_map: Mapping[str, Label] | None = None,
    provenance: Provenance = Provenance.BENCHMARK,
) -> tuple[CandidatePair, ...]:
    """Parse one canonical pair CSV.

    Malformed rows are rejected with their (1-based) file row number.
    """
    path = Path(path)
    schema = tuple(schema)
    label_map = dict(label_map) if label_map is not None else dict(DEFAULT_LABEL_MAP)
    required = _pair_columns(schema)
    pairs: list[CandidatePair] = []
    seen: set[tuple[str, str]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path.name}: missing column(s) {missing}")
        for lineno, row in enumerate(reader, start=2):
            if any(row.get(c) is None for c in required):
                raise SchemaError(f"{path.name} row {lineno}: short row")
            raw_label = row["label"].strip()
            if raw_label not in label_map:
                raise SchemaError(
                    f"{path.name} row {lineno}: unknown label value {raw_label!r}"
                )
            left = EntityRecord(
                id=row["id_left"], attributes={a: row[f"{a}_left"] for a in schema}
            )
            right = EntityRecord(
                id=row["id_right"], attributes={a: row[f"{a}_right"] for a in schema}
            )
            if not left.id or not right.id:
                raise SchemaError(f"{path.name} row {lineno}: empty record id")
            if (left.id, right.id) in seen:
                raise DuplicatePairError(
                    f"{path.name} row {lineno}: duplicate pair ({left.id}, {right.id})"
                )
            seen.add((left.id, right.id))
            pairs.append(
                CandidatePair(
                    left=left, right=right, label=label_map[raw_label], provenance=provenance
                )
            )
    return tuple(pairs)


_LABEL_CELLS = {Label.MATCH: "1", Label.NON_MATCH: "0", Label.UNLABELED: ""}


def write_pair_file(path: str | Path, pairs: Iterable[CandidatePair], schema: Sequence[str]) -> None:
    path = Path(path)
    schema = tuple(schema)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_pair_columns(schema))
        for pair in pairs:
            row = [pair.left.id, pair.right.id, _LABEL_CELLS[pair.label]]
            row += [pair.left.attributes.get(a, "") for a in schema]
            row += [pair.right.attributes.get(a, "") for a in schema]
            writer.writerow(row)


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a dataset from its YAML manifest; split paths resolve relative to it."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = yaml.safe_load(fh)
    if not isinstance(manifest, dict):
        raise SchemaError(f"{manifest_path}: manifest must be a mapping")
    try:
        name = str(manifest["name"])
        domain = str(manifest["domain"])
        schema = tuple(str(a) for a in manifest["schema"])
        rule = SerializationRule.from_mapping(manifest["serialization"])
        split_files = manifest["splits"]
    except KeyError as exc:
        raise SchemaError(f"{manifest_path}: manifest missing key {exc}") from None
    label_map = None
    if "label_values" in manifest:
        label_map = {str(k): Label(str(v)) for k, v in manifest["label_values"].items()}
    splits = {}
    for split, rel in split_files.items():
        splits[split] = load_pair_file(manifest_path.parent / str(rel), schema, label_map)
    return Dataset(name=name, domain=domain, schema=schema, serialization=rule, splits=splits)


def write_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write manifest plus one canonical CSV per split; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": dataset.name,
        "domain": dataset.domain,
        "schema": list(dataset.schema),
        "serialization": dataset.serialization.to_mapping(),
        "splits": {split: f"{split}.csv" for split in dataset.splits},
    }
    for split, pairs in dataset.splits.items():
        write_pair_file(out_dir / f"{split}.csv", pairs, dataset.schema)
    manifest_path = out_dir / "dataset.yaml"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True)
    return manifest_path


def format_stats_table(datasets: Sequence[tuple[str, Mapping[str, SplitStats]]]) -> str:
    """Plain-text stats table: one dataset per row, pos/neg per split."""
    headers = ["Dataset"]
    for split in SPLIT_NAMES:
        title = split.capitalize()
        headers += [f"{title} Pos", f"{title} Neg"]
    rows = [headers]
    flagged: list[str] = []
    for name, stats in datasets:
        row = [name]
        for split in SPLIT_NAMES:
            st = stats.get(split)
            row += [f"{st.pos:,}", f"{st.neg:,}"] if st else ["-", "-"]
        rows.append(row)
        for split in SPLIT_NAMES:
            st = stats.get(split)
            if st and st.unlabeled:
                flagged.append(f"{name}/{split}: {st.unlabeled} unlabeled pair(s)")
            if st and st.empty_sides:
                flagged.append(f"{name}/{split}: {st.empty_sides} pair(s) with an empty serialized side")
    widths = [max(len(r[i]) for r in rows) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) if j == 0 else cell.rjust(w) for j, (cell, w) in enumerate(zip(row, widths))))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    for note in flagged:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"
