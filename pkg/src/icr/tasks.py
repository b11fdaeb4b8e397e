"""Task definitions, datasets, and prompt rendering.

A task is a single-label classification problem: a set of label identifiers,
a verbalizer per label (the surface string emitted in prompts), and a prompt
template with named ``{field}`` placeholders plus one ``{label}`` answer slot
in final position. All file ingestion lives here as well.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .canonical import sha256_of_json
from .errors import IngestionError, RenderError, TaskConfigError

logger = logging.getLogger(__name__)

ROLES = ("train-pool", "validation", "test")

ANSWER_SLOT = "label"


def normalize_verbalizer(text: str) -> str:
    """Normalization applied before first-token matching: drop leading
    whitespace, fold case."""
    return text.lstrip().casefold()


@dataclass(frozen=True)
class LabelSet:
    """Ordered label identifiers plus their prompt surface forms."""

    labels: tuple[str, ...]
    verbalizers: dict[str, str]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise TaskConfigError("a task needs at least 2 labels")
        if len(set(self.labels)) != len(self.labels):
            raise TaskConfigError("label identifiers must be unique")
        missing = [l for l in self.labels if l not in self.verbalizers]
        if missing:
            raise TaskConfigError(f"labels without verbalizers: {missing}")
        extra = set(self.verbalizers) - set(self.labels)
        if extra:
            raise TaskConfigError(f"verbalizers for unknown labels: {sorted(extra)}")
        surface = [self.verbalizers[l] for l in self.labels]
        if any(not v for v in surface):
            raise TaskConfigError("verbalizers must be non-empty")
        if len(set(surface)) != len(surface):
            raise TaskConfigError("verbalizers must be unique")
        # A verbalizer that is a prefix of another breaks first-token
        # probability extraction: the shorter one would swallow both.
        normed = [normalize_verbalizer(v) for v in surface]
        for i, a in enumerate(normed):
            for j, b in enumerate(normed):
                if i != j and b.startswith(a):
                    raise TaskConfigError(
                        f"verbalizer {surface[i]!r} is a prefix of {surface[j]!r} "
                        "after normalization"
                    )
        for l in self.labels:
            if len(self.verbalizers[l].split()) > 1:
                logger.warning(
                    "verbalizer %r for label %r contains whitespace; "
                    "first-token probability extraction may be unreliable",
                    self.verbalizers[l], l,
                )

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def verbalizer(self, label: str) -> str:
        return self.verbalizers[label]


@dataclass(frozen=True)
class Example:
    """One labeled text instance. ``fields`` maps field name to text."""

    id: int
    fields: dict[str, str]
    label: str


def example_text(example_or_fields: Example | Mapping[str, str]) -> str:
    """Flatten an example's fields into one text, field names sorted for
    determinism. Used by the synthetic model and the hashing embedder."""
    fields = (
        example_or_fields.fields
        if isinstance(example_or_fields, Example)
        else example_or_fields
    )
    return " ".join(fields[k] for k in sorted(fields))


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of examples with a role in the experiment."""

    examples: tuple[Example, ...]
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise TaskConfigError(f"unknown dataset role {self.role!r}; expected one of {ROLES}")
        if not self.examples:
            raise IngestionError("dataset is empty")
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise IngestionError("duplicate example ids in dataset")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def by_id(self, example_id: int) -> Example:
        for e in self.examples:
            if e.id == example_id:
                return e
        raise KeyError(example_id)

    def label_counts(self, label_order: Sequence[str]) -> dict[str, int]:
        counts = {l: 0 for l in label_order}
        for e in self.examples:
            counts[e.label] = counts.get(e.label, 0) + 1
        return counts


@dataclass(frozen=True)
class TaskSpec:
    """A classification task: labels, verbalizers, and prompt conventions.

    ``template`` holds named ``{field}`` placeholders and exactly one
    ``{label}`` answer slot, which must be the last thing in the template.
    ``demo_separator`` joins rendered demonstration blocks (and the final
    query block); ``query_suffix`` is inserted where the answer would go in
    the query block. ``max_prompt_chars`` is a blunt length guard; rendering
    a longer prompt raises.
    """

    name: str
    label_set: LabelSet
    template: str
    demo_separator: str = "\n\n"
    query_suffix: str = ""
    max_prompt_chars: int | None = None

    def __post_init__(self):
        if not self.name:
            raise TaskConfigError("task name must be non-empty")
        fields = []
        seen_slot = False
        parsed = list(string.Formatter().parse(self.template))
        for _, name, spec, conv in parsed:
            if name is None:
                continue
            if spec or conv:
                raise TaskConfigError("template placeholders must be plain {name} references")
            if not name.isidentifier():
                raise TaskConfigError(f"bad template placeholder {name!r}")
            if name == ANSWER_SLOT:
                if seen_slot:
                    raise TaskConfigError("template must contain exactly one {label} answer slot")
                seen_slot = True
            else:
                if seen_slot:
                    raise TaskConfigError("fields may not appear after the {label} answer slot")
                if name not in fields:
                    fields.append(name)
        if not seen_slot:
            raise TaskConfigError("template is missing the {label} answer slot")
        if parsed[-1][1] != ANSWER_SLOT:
            raise TaskConfigError("the {label} answer slot must be in final position")
        if not fields:
            raise TaskConfigError("template references no input fields")
        object.__setattr__(self, "_fields", tuple(fields))

    @property
    def field_names(self) -> tuple[str, ...]:
        return self._fields  # type: ignore[attr-defined]

    def label_set_hash(self) -> str:
        return sha256_of_json(
            {"labels": list(self.label_set.labels), "verbalizers": self.label_set.verbalizers}
        )


@dataclass(frozen=True)
class Provenance:
    """How a demonstration set was produced."""

    method: str
    seed: int | None = None
    iterations: int = 0
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DemonstrationSet:
    """An ordered list of examples forming the in-context portion of a prompt."""

    members: tuple[Example, ...]
    source_task: str
    provenance: Provenance

    def __post_init__(self):
        ids = [e.id for e in self.members]
        if len(set(ids)) != len(ids):
            raise TaskConfigError("demonstration sets may not repeat example ids")

    def __len__(self) -> int:
        return len(self.members)

    def member_ids(self) -> tuple[int, ...]:
        return tuple(e.id for e in self.members)


def empty_demonstrations(task: TaskSpec, method: str = "zero-shot") -> DemonstrationSet:
    return DemonstrationSet(members=(), source_task=task.name, provenance=Provenance(method=method))


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------


def _render_block(task: TaskSpec, fields: Mapping[str, str], answer: str) -> str:
    values = dict(fields)
    missing = [f for f in task.field_names if f not in values or values[f] == ""]
    if missing:
        raise RenderError(f"missing fields {missing} for task {task.name!r}")
    values[ANSWER_SLOT] = answer
    try:
        return task.template.format_map(values)
    except KeyError as exc:  # unreachable for validated templates
        raise RenderError(f"template field {exc} not provided") from exc


def render_prompt(
    task: TaskSpec,
    demos: DemonstrationSet | Sequence[Example],
    query_fields: Mapping[str, str],
) -> str:
    """Render the full prompt: demonstration blocks in order, then the query
    block with the answer left blank after ``query_suffix``. Byte-deterministic.
    """
    members = demos.members if isinstance(demos, DemonstrationSet) else tuple(demos)
    blocks = []
    for demo in members:
        verb = task.label_set.verbalizer(demo.label)
        blocks.append(_render_block(task, demo.fields, verb))
    blocks.append(_render_block(task, query_fields, task.query_suffix))
    prompt = task.demo_separator.join(blocks)
    if task.max_prompt_chars is not None and len(prompt) > task.max_prompt_chars:
        raise RenderError(
            f"rendered prompt has {len(prompt)} chars, over the task guard "
            f"of {task.max_prompt_chars}"
        )
    return prompt


# ---------------------------------------------------------------------------
# Task config files
# ---------------------------------------------------------------------------


def load_task(path: str | Path) -> TaskSpec:
    """Load a TaskSpec from a TOML or JSON config file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise TaskConfigError(f"cannot read task config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            doc = tomllib.loads(raw.decode("utf-8"))
        else:
            doc = json.loads(raw.decode("utf-8"))
    except Exception as exc:
        raise TaskConfigError(f"cannot parse task config {path}: {exc}") from exc
    return task_from_dict(doc)


def task_from_dict(doc: Mapping) -> TaskSpec:
    for key in ("name", "labels", "verbalizers", "template"):
        if key not in doc:
            raise TaskConfigError(f"task config missing required key {key!r}")
    labels = tuple(str(l) for l in doc["labels"])
    verbalizers = {str(k): str(v) for k, v in dict(doc["verbalizers"]).items()}
    label_set = LabelSet(labels=labels, verbalizers=verbalizers)
    task = TaskSpec(
        name=str(doc["name"]),
        label_set=label_set,
        template=str(doc["template"]),
        demo_separator=str(doc.get("demo_separator", "\n\n")),
        query_suffix=str(doc.get("query_suffix", "")),
        max_prompt_chars=doc.get("max_prompt_chars"),
    )
    declared = doc.get("fields")
    if declared is not None and set(task.field_names) - set(declared):
        raise TaskConfigError(
            f"template references undeclared fields: "
            f"{sorted(set(task.field_names) - set(declared))}"
        )
    return task


# ---------------------------------------------------------------------------
# Data file ingestion
# ---------------------------------------------------------------------------


def _example_from_record(
    record: Mapping, task: TaskSpec, example_id: int, line: int
) -> Example:
    if "label" not in record or record["label"] is None:
        raise IngestionError("record has no 'label' column", line=line)
    label = str(record["label"])
    if label not in task.label_set.labels:
        raise IngestionError(f"unknown label {label!r}", line=line)
    fields = {}
    for name in task.field_names:
        value = record.get(name)
        if value is None or str(value) == "":
            raise IngestionError(f"missing field {name!r}", line=line)
        fields[name] = str(value)
    return Example(id=example_id, fields=fields, label=label)


def load_dataset(path: str | Path, fmt: str, task: TaskSpec, role: str) -> Dataset:
    """Load a JSONL or CSV data file, assigning ids in file order.

    JSONL records are one object per line; CSV needs a header row. The label
    column must be named ``label`` and hold label identifiers, which are
    validated against the task's label set.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if fmt == "jsonl":
        examples = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"bad JSON ({exc.msg})", line=lineno) from exc
            examples.append(_example_from_record(record, task, len(examples), lineno))
    elif fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None:
            raise IngestionError(f"{path} has no header row")
        examples = []
        for lineno, record in enumerate(reader, start=2):
            examples.append(_example_from_record(record, task, len(examples), lineno))
    else:
        raise IngestionError(f"unknown data format {fmt!r}; expected jsonl or csv")
    if not examples:
        raise IngestionError(f"{path} contains no records")
    return Dataset(examples=tuple(examples), role=role)


def save_dataset(dataset: Dataset, path: str | Path, fmt: str, task: TaskSpec) -> None:
    """Serialize a dataset back to disk; inverse of load_dataset."""
    path = Path(path)
    if fmt == "jsonl":
        lines = []
        for e in dataset:
            record = {name: e.fields[name] for name in task.field_names}
            record["label"] = e.label
            lines.append(json.dumps(record, ensure_ascii=False))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif fmt == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(task.field_names) + ["label"])
            for e in dataset:
                writer.writerow([e.fields[name] for name in task.field_names] + [e.label])
    else:
        raise IngestionError(f"unknown data format {fmt!r}; expected jsonl or csv")


# ---------------------------------------------------------------------------
# Stratified sampling
# ---------------------------------------------------------------------------


def proportional_counts(
    counts: Mapping[str, int], total: int, label_order: Sequence[str]
) -> dict[str, int]:
    """Largest-remainder apportionment of ``total`` over labels.

    Each allocation differs from exact proportionality by less than one.
    Remainder ties go to the earlier label in ``label_order``.
    """
    n = sum(counts.values())
    floors, remainders = {}, []
    for idx, label in enumerate(label_order):
        c = counts.get(label, 0)
        quota = total * c / n
        floors[label] = int(quota)
        remainders.append((-(quota - int(quota)), idx, label))
    leftover = total - sum(floors.values())
    for _, _, label in sorted(remainders)[:leftover]:
        floors[label] += 1
    return floors


def stratified_sample_ids(
    examples: Sequence[Example],
    size: int,
    seed: int | random.Random,
    label_order: Sequence[str],
) -> list[int]:
    """Pick ``size`` example ids preserving the source label distribution.

    Uniform without replacement within each label; deterministic in the seed
    (an already-seeded Random may be passed to share state with a caller).
    """
    by_label: dict[str, list[Example]] = {}
    for e in examples:
        by_label.setdefault(e.label, []).append(e)
    counts = {l: len(v) for l, v in by_label.items()}
    shares = proportional_counts(counts, size, label_order)
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    chosen: list[int] = []
    for label in label_order:
        members = by_label.get(label, [])
        take = shares.get(label, 0)
        if take:
            chosen.extend(e.id for e in rng.sample(members, take))
    return chosen


def stratified_subsample(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Uniform stratified subsample; keeps original ids and file order."""
    if size > len(dataset):
        raise TaskConfigError(f"subsample size {size} exceeds dataset size {len(dataset)}")
    labels_present = sorted({e.label for e in dataset})
    if size < len(labels_present):
        raise TaskConfigError(
            f"subsample size {size} is below the number of labels "
            f"({len(labels_present)}); cannot preserve the distribution"
        )
    keep = set(stratified_sample_ids(dataset.examples, size, seed, labels_present))
    return Dataset(
        examples=tuple(e for e in dataset if e.id in keep),
        role=dataset.role,
    )
