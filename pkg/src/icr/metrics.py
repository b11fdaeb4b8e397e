"""Classification metrics: accuracy, per-label precision/recall/F1, macro-F1.

Hand-rolled rather than delegated so the zero-support convention is pinned:
a label with no gold and no predicted occurrences contributes F1 = 0 and is
still counted in the macro average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import EvaluationError


@dataclass(frozen=True)
class LabelMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class EvalReport:
    """Scores of one prompt (or retrieval plan) on one test set."""

    task: str
    labels: tuple[str, ...]
    accuracy: float
    macro_f1: float
    per_label: dict[str, LabelMetrics]
    confusion: tuple[tuple[int, ...], ...]  # rows gold, columns predicted
    n_cases: int
    prompt_hash: str
    skipped_ids: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "labels": list(self.labels),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_label": {
                label: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for label, m in self.per_label.items()
            },
            "confusion": [list(row) for row in self.confusion],
            "n_cases": self.n_cases,
            "prompt_hash": self.prompt_hash,
            "skipped_ids": list(self.skipped_ids),
        }

    def csv_rows(self) -> list[list]:
        rows = [["label", "precision", "recall", "f1", "support"]]
        for label in self.labels:
            m = self.per_label[label]
            rows.append([label, m.precision, m.recall, m.f1, m.support])
        rows.append(["__accuracy__", "", "", self.accuracy, self.n_cases])
        rows.append(["__macro_f1__", "", "", self.macro_f1, self.n_cases])
        return rows


def confusion_matrix(
    labels: Sequence[str], gold: Sequence[str], predicted: Sequence[str]
) -> tuple[tuple[int, ...], ...]:
    index = {label: i for i, label in enumerate(labels)}
    matrix = [[0] * len(labels) for _ in labels]
    for g, p in zip(gold, predicted):
        matrix[index[g]][index[p]] += 1
    return tuple(tuple(row) for row in matrix)


def compute_report(
    task_name: str,
    labels: Sequence[str],
    gold: Sequence[str],
    predicted: Sequence[str],
    prompt_hash: str = "",
    skipped_ids: Sequence[int] = (),
) -> EvalReport:
    if len(gold) != len(predicted):
        raise EvaluationError("gold and predicted lengths differ")
    if not gold:
        raise EvaluationError("cannot score an empty case list")
    labels = tuple(labels)
    matrix = confusion_matrix(labels, gold, predicted)
    total = len(gold)
    correct = sum(matrix[i][i] for i in range(len(labels)))
    per_label = {}
    f1_sum = 0.0
    for i, label in enumerate(labels):
        support = sum(matrix[i])
        predicted_count = sum(row[i] for row in matrix)
        tp = matrix[i][i]
        precision = tp / predicted_count if predicted_count else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_label[label] = LabelMetrics(precision=precision, recall=recall, f1=f1, support=support)
        f1_sum += f1
    return EvalReport(
        task=task_name,
        labels=labels,
        accuracy=correct / total,
        macro_f1=f1_sum / len(labels),
        per_label=per_label,
        confusion=matrix,
        n_cases=total,
        prompt_hash=prompt_hash,
        skipped_ids=tuple(skipped_ids),
    )


def accuracy_of(gold: Sequence[str], predicted: Sequence[str]) -> float:
    if not gold:
        raise EvaluationError("cannot score an empty case list")
    return sum(g == p for g, p in zip(gold, predicted)) / len(gold)


def label_histogram(labels: Sequence[str], items: Sequence[str]) -> dict[str, int]:
    counts = {label: 0 for label in labels}
    for item in items:
        counts[item] += 1
    return counts
