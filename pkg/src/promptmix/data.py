"""Dataset records, attribute ontology, and label rendering.

Three task shapes are supported. Each renders its structured label to a flat
string that the student model learns to emit:

* ``multi-intent``  -> ``"intent_a, intent_b"`` (sorted)
* ``ner``           -> ``"category = value | category = value"`` (sorted pairs)
* ``semantic-parse`` -> ``"[IN:intent] [IN:intent2] [SL:type value]"``

The semantic-parse form keeps intents in their given order, sorts slot clauses
by ``(type, value)`` and drops filler tokens from slot values.  A slot whose
value becomes empty renders as ``[SL:type]``.  Values may not contain ``]``.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DatasetParseError, DatasetValidationError, ValidationError
from .fileio import atomic_write_text

TASK_KINDS = ("multi-intent", "ner", "semantic-parse")
SPLITS = ("source", "target-train", "target-dev", "target-test")


@dataclass(frozen=True)
class AttributeSpec:
    id: str
    name: str
    description: str
    domain: str

    def __post_init__(self):
        if not self.id:
            raise ValidationError("attribute id must be non-empty")
        if not self.description or not self.description.strip():
            raise ValidationError(f"attribute {self.id!r} needs a non-empty description")


@dataclass(frozen=True)
class SeedExample:
    id: str
    utterance: str
    attributes: tuple[str, ...]
    slots: tuple[tuple[str, str], ...] = ()
    domain: str = ""
    split: str = "target-train"

    @property
    def attribute_set(self) -> frozenset[str]:
        return frozenset(self.attributes)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "utterance": self.utterance,
            "attributes": list(self.attributes),
            "slots": [list(pair) for pair in self.slots],
            "domain": self.domain,
            "split": self.split,
        }


@dataclass(frozen=True)
class DatasetSchema:
    task_kind: str
    ontology: tuple[AttributeSpec, ...]
    source_domains: frozenset[str]
    target_domain: str
    filler_words: tuple[str, ...] = ()
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValidationError(f"unknown task_kind {self.task_kind!r}; expected one of {TASK_KINDS}")
        if self.target_domain in self.source_domains:
            raise ValidationError(f"target domain {self.target_domain!r} is also a source domain")
        by_id = {}
        for spec in self.ontology:
            if spec.id in by_id:
                raise ValidationError(f"duplicate attribute id {spec.id!r} in ontology")
            by_id[spec.id] = spec
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "filler_words", tuple(w.lower() for w in self.filler_words))

    def attribute(self, attribute_id: str) -> AttributeSpec:
        return self._by_id[attribute_id]

    def has_attribute(self, attribute_id: str) -> bool:
        return attribute_id in self._by_id

    @property
    def attribute_ids(self) -> list[str]:
        return [spec.id for spec in self.ontology]

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "ontology": [
                {"id": s.id, "name": s.name, "description": s.description, "domain": s.domain}
                for s in self.ontology
            ],
            "source_domains": sorted(self.source_domains),
            "target_domain": self.target_domain,
            "filler_words": list(self.filler_words),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetSchema":
        try:
            ontology = tuple(AttributeSpec(**spec) for spec in raw["ontology"])
            return cls(
                task_kind=raw["task_kind"],
                ontology=ontology,
                source_domains=frozenset(raw.get("source_domains", ())),
                target_domain=raw["target_domain"],
                filler_words=tuple(raw.get("filler_words", ())),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed schema: {exc}") from exc


def load_schema(path) -> DatasetSchema:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: schema is not valid JSON: {exc}") from exc
    return DatasetSchema.from_dict(raw)


@dataclass(frozen=True)
class CanonicalLabel:
    rendered: str

    def __str__(self):
        return self.rendered


def _example_from_record(raw: dict, schema: DatasetSchema) -> SeedExample:
    record_id = raw.get("id") if isinstance(raw, dict) else None
    if not isinstance(raw, dict):
        raise DatasetValidationError(record_id, "record is not a JSON object")
    if not isinstance(record_id, str) or not record_id:
        raise DatasetValidationError(record_id, "missing or empty id")
    utterance = raw.get("utterance")
    if not isinstance(utterance, str) or not utterance.strip():
        raise DatasetValidationError(record_id, "utterance must be a non-empty string")
    attributes = raw.get("attributes")
    if not isinstance(attributes, list) or not attributes or not all(isinstance(a, str) for a in attributes):
        raise DatasetValidationError(record_id, "attributes must be a non-empty list of strings")
    if len(set(attributes)) != len(attributes):
        raise DatasetValidationError(record_id, "attributes contain duplicates")
    for attribute_id in attributes:
        if not schema.has_attribute(attribute_id):
            raise DatasetValidationError(record_id, f"unknown attribute {attribute_id!r}")
    slots = raw.get("slots", [])
    if not isinstance(slots, list) or not all(
        isinstance(s, (list, tuple)) and len(s) == 2 and all(isinstance(x, str) for x in s) for s in slots
    ):
        raise DatasetValidationError(record_id, "slots must be a list of [type, value] string pairs")
    domain = raw.get("domain", "")
    if not isinstance(domain, str):
        raise DatasetValidationError(record_id, "domain must be a string")
    split = raw.get("split")
    if split not in SPLITS:
        raise DatasetValidationError(record_id, f"split must be one of {SPLITS}, got {split!r}")
    return SeedExample(
        id=record_id,
        utterance=utterance,
        attributes=tuple(attributes),
        slots=tuple((t, v) for t, v in slots),
        domain=domain,
        split=split,
    )


def load_dataset(path, schema: DatasetSchema) -> list[SeedExample]:
    """Read a JSONL file of seed examples, validated and sorted by id."""
    examples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(path, line_no, exc.msg) from exc
            example = _example_from_record(raw, schema)
            if example.id in seen:
                raise DatasetValidationError(example.id, "duplicate id")
            seen.add(example.id)
            examples.append(example)
    examples.sort(key=lambda ex: ex.id)
    return examples


def serialize_example(example: SeedExample) -> str:
    return json.dumps(example.to_record(), ensure_ascii=False)


def dump_dataset(examples: Iterable[SeedExample], path) -> None:
    atomic_write_text(path, "".join(serialize_example(ex) + "\n" for ex in examples))


def attribute_frequencies(data: Iterable, attribute_ids: Iterable[str] = ()) -> Counter:
    """Count attribute occurrences; ids in ``attribute_ids`` appear with 0 if unseen.

    Works on anything exposing an ``attributes`` sequence. Missing keys read
    as 0 because the result is a :class:`collections.Counter`.
    """
    counts = Counter({a: 0 for a in attribute_ids})
    for item in data:
        counts.update(item.attributes)
    return counts


def attribute_overlap(a: Iterable[str], b: Iterable[str]) -> float:
    """Jaccard index of two attribute sets (1.0 when both are empty)."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def strip_fillers(value: str, filler_words: Sequence[str]) -> str:
    fillers = set(filler_words)
    return " ".join(tok for tok in value.split() if tok not in fillers)


def canonicalize_semantic_parse(intents: Sequence[str], slots: Sequence[tuple[str, str]],
                                schema: DatasetSchema) -> CanonicalLabel:
    if schema.task_kind != "semantic-parse":
        raise ValidationError(f"canonical parse requested for task_kind {schema.task_kind!r}")
    cleaned = sorted((t, strip_fillers(v, schema.filler_words)) for t, v in slots)
    clauses = [f"[IN:{intent}]" for intent in intents]
    clauses += [f"[SL:{t} {v}]" if v else f"[SL:{t}]" for t, v in cleaned]
    return CanonicalLabel(" ".join(clauses))


_CLAUSE = re.compile(r"\[(IN|SL):([^\s\]]+)(?: ([^\]]*))?\]")


def parse_semantic_parse(rendered: str) -> tuple[list[str], list[tuple[str, str]]]:
    """Inverse of :func:`canonicalize_semantic_parse` rendering."""
    intents, slots = [], []
    for kind, name, value in _CLAUSE.findall(rendered):
        if kind == "IN":
            intents.append(name)
        else:
            slots.append((name, value))
    return intents, slots


def render_label(example, schema: DatasetSchema) -> CanonicalLabel:
    """Task-specific serialisation of an example's structured label."""
    if schema.task_kind == "multi-intent":
        return CanonicalLabel(", ".join(sorted(example.attributes)))
    if schema.task_kind == "ner":
        return CanonicalLabel(" | ".join(f"{c} = {v}" for c, v in sorted(example.slots)))
    return canonicalize_semantic_parse(example.attributes, example.slots, schema)


def label_atoms(rendered: str, task_kind: str) -> frozenset:
    """Split a rendered label back into the units that task metrics compare."""
    if task_kind == "multi-intent":
        return frozenset(p.strip() for p in rendered.split(",") if p.strip())
    if task_kind == "ner":
        atoms = set()
        for part in rendered.split("|"):
            if "=" in part:
                cat, _, val = part.partition("=")
                atoms.add((cat.strip(), val.strip()))
        return frozenset(atoms)
    intents, slots = parse_semantic_parse(rendered)
    return frozenset([("IN", i) for i in intents] + [("SL", t, v) for t, v in slots])
