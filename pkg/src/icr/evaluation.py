"""Prediction and scoring of prompts (or retrieval plans) on test sets."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .artifacts import plan_content_hash, prompt_content_hash
from .backends import Backend, ordered_map, resolve_parallelism
from .baselines import RetrievalPlan, retrieve, uniform_select
from .errors import ConfigError, EvaluationError, IcrError
from .metrics import EvalReport, compute_report
from .tasks import Dataset, DemonstrationSet, Example, Provenance, TaskSpec


def resolve_demos(
    backend: Backend,
    task: TaskSpec,
    source: DemonstrationSet | RetrievalPlan,
    query: Example | Mapping[str, str],
) -> DemonstrationSet:
    """Fixed prompts pass through; retrieval plans run per query."""
    if isinstance(source, DemonstrationSet):
        return source
    return retrieve(source, backend, task, query)


def predict(
    backend: Backend,
    task: TaskSpec,
    source: DemonstrationSet | RetrievalPlan,
    query: Example | Mapping[str, str],
) -> str:
    """Argmax label for one query; exact ties go to the earliest label."""
    demos = resolve_demos(backend, task, source, query)
    fields = query.fields if isinstance(query, Example) else query
    dist = backend.label_distribution(task, demos, fields)
    return dist.argmax(task.label_set.labels)


def source_hash(task: TaskSpec, source: DemonstrationSet | RetrievalPlan) -> str:
    if isinstance(source, DemonstrationSet):
        return prompt_content_hash(task, source)
    return plan_content_hash(task, source)


def evaluate(
    backend: Backend,
    task: TaskSpec,
    source: DemonstrationSet | RetrievalPlan,
    test: Dataset,
    *,
    skip_failures: bool = False,
    parallelism: int | None = None,
    prompt_hash: str | None = None,
) -> EvalReport:
    """One prediction per test case; accuracy, macro-F1, confusion matrix.

    A backend failure on any case fails the run naming the case id, unless
    ``skip_failures`` drops the case and records its id in the report.
    """

    def worker(case: Example):
        try:
            return case.label, predict(backend, task, source, case)
        except IcrError as exc:
            return case.id, exc

    results = ordered_map(worker, test.examples, resolve_parallelism(backend, parallelism))
    gold, predicted, skipped = [], [], []
    for case, outcome in zip(test.examples, results):
        value = outcome[1]
        if isinstance(value, IcrError):
            if not skip_failures:
                raise EvaluationError(f"prediction failed for case id {case.id}: {value}") from value
            skipped.append(case.id)
        else:
            gold.append(outcome[0])
            predicted.append(value)
    if not gold:
        raise EvaluationError("no test cases were scored")
    return compute_report(
        task.name,
        task.label_set.labels,
        gold,
        predicted,
        prompt_hash=prompt_hash if prompt_hash is not None else source_hash(task, source),
        skipped_ids=skipped,
    )


# ---------------------------------------------------------------------------
# Different-task evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransferReport:
    """A frozen prompt evaluated under another task, against that task's
    own uniform-sampling baseline."""

    report: EvalReport
    baseline: EvalReport
    delta_accuracy: float
    delta_macro_f1: float
    source_task: str
    target_task: str

    def to_dict(self) -> dict:
        return {
            "source_task": self.source_task,
            "target_task": self.target_task,
            "report": self.report.to_dict(),
            "baseline": self.baseline.to_dict(),
            "delta_accuracy": self.delta_accuracy,
            "delta_macro_f1": self.delta_macro_f1,
        }


def reverbalize_members(
    members: Sequence[Example],
    target_task: TaskSpec,
    label_map: Mapping[str, str] | None = None,
) -> tuple[Example, ...]:
    """Carry demonstrations into another task's label space.

    Labels map through ``label_map`` when given, otherwise they must already
    be valid target labels. Each member must provide every field the target
    template renders.
    """
    target_labels = set(target_task.label_set.labels)
    mapped = []
    for member in members:
        label = label_map.get(member.label, member.label) if label_map else member.label
        if label not in target_labels:
            raise ConfigError(
                f"label {member.label!r} cannot be re-verbalized for task "
                f"{target_task.name!r}; provide a label map"
            )
        missing = [f for f in target_task.field_names if f not in member.fields]
        if missing:
            raise ConfigError(
                f"demonstration id {member.id} lacks fields {missing} "
                f"required by task {target_task.name!r}"
            )
        mapped.append(Example(id=member.id, fields=member.fields, label=label))
    return tuple(mapped)


def transfer_evaluate(
    backend: Backend,
    source_prompt: DemonstrationSet,
    target_task: TaskSpec,
    target_test: Dataset,
    *,
    target_pool: Dataset,
    seed: int | None = None,
    label_map: Mapping[str, str] | None = None,
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> TransferReport:
    """Evaluate a prompt built elsewhere under ``target_task``'s template and
    report the gain over same-task uniform sampling with the same seed."""
    members = reverbalize_members(source_prompt.members, target_task, label_map)
    prov = source_prompt.provenance
    demos = DemonstrationSet(
        members=members,
        source_task=target_task.name,
        provenance=replace(
            prov, extra={**prov.extra, "transferred_from": source_prompt.source_task}
        ),
    )
    report = evaluate(
        backend, target_task, demos, target_test,
        skip_failures=skip_failures, parallelism=parallelism,
    )
    baseline_seed = seed if seed is not None else (prov.seed or 0)
    baseline_demos = uniform_select(target_pool, len(members), baseline_seed)
    baseline_demos = DemonstrationSet(
        members=baseline_demos.members,
        source_task=target_task.name,
        provenance=Provenance(method="uniform", seed=baseline_seed),
    )
    baseline = evaluate(
        backend, target_task, baseline_demos, target_test,
        skip_failures=skip_failures, parallelism=parallelism,
    )
    return TransferReport(
        report=report,
        baseline=baseline,
        delta_accuracy=report.accuracy - baseline.accuracy,
        delta_macro_f1=report.macro_f1 - baseline.macro_f1,
        source_task=source_prompt.source_task,
        target_task=target_task.name,
    )
