"""Artifact files: prompt artifacts, retrieval plans, manifests, reports.

Every artifact is JSON with a ``content_hash`` over its canonical form
(hash field excluded), so downstream commands can verify integrity and
reruns can be byte-compared. Writes are atomic (temp file + rename).
Timestamps never enter hashed content.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from .baselines import RetrievalPlan
from .canonical import sha256_of_json
from .embeddings import EmbeddingProvider
from .errors import ArtifactError
from .selection import IterationRecord
from .tasks import DemonstrationSet, Example, Provenance, TaskSpec

PROMPT_KIND = "prompt"
PLAN_KIND = "plan"


def example_to_dict(example: Example) -> dict:
    return {"id": example.id, "fields": dict(example.fields), "label": example.label}


def example_from_dict(doc: dict) -> Example:
    return Example(id=int(doc["id"]), fields=dict(doc["fields"]), label=str(doc["label"]))


def prompt_content_hash(task: TaskSpec, demos: DemonstrationSet) -> str:
    return sha256_of_json(
        {
            "task": task.name,
            "label_set_hash": task.label_set_hash(),
            "members": [example_to_dict(e) for e in demos.members],
        }
    )


def plan_content_hash(task: TaskSpec, plan: RetrievalPlan) -> str:
    return sha256_of_json(
        {
            "task": task.name,
            "label_set_hash": task.label_set_hash(),
            "method": plan.method,
            "k": plan.k,
            "provider_id": plan.provider.provider_id,
            "pool": [example_to_dict(e) for e in plan.pool],
        }
    )


def prompt_artifact_doc(
    task: TaskSpec,
    demos: DemonstrationSet,
    config: dict | None = None,
    trace: Sequence[IterationRecord] = (),
) -> dict:
    doc = {
        "kind": PROMPT_KIND,
        "task": task.name,
        "label_set_hash": task.label_set_hash(),
        "method": demos.provenance.method,
        "seed": demos.provenance.seed,
        "iterations": demos.provenance.iterations,
        "provenance_extra": demos.provenance.extra,
        "config": config or {},
        "members": [example_to_dict(e) for e in demos.members],
        "trace": [asdict(r) for r in trace],
    }
    doc["content_hash"] = sha256_of_json(doc)
    return doc


def plan_artifact_doc(task: TaskSpec, plan: RetrievalPlan, provider_spec: str) -> dict:
    doc = {
        "kind": PLAN_KIND,
        "task": task.name,
        "label_set_hash": task.label_set_hash(),
        "method": plan.method,
        "k": plan.k,
        "provider_id": plan.provider.provider_id,
        "provider_spec": provider_spec,
        "pool": [example_to_dict(e) for e in plan.pool],
    }
    doc["content_hash"] = sha256_of_json(doc)
    return doc


def demos_from_artifact(doc: dict) -> DemonstrationSet:
    return DemonstrationSet(
        members=tuple(example_from_dict(d) for d in doc["members"]),
        source_task=doc["task"],
        provenance=Provenance(
            method=doc.get("method", "unknown"),
            seed=doc.get("seed"),
            iterations=doc.get("iterations", 0),
            extra=doc.get("provenance_extra", {}),
        ),
    )


def plan_from_artifact(
    doc: dict,
    provider: EmbeddingProvider,
    query_provider: EmbeddingProvider | None = None,
) -> RetrievalPlan:
    return RetrievalPlan(
        method=doc["method"],
        k=int(doc["k"]),
        provider=provider,
        pool=tuple(example_from_dict(d) for d in doc["pool"]),
        task_name=doc["task"],
        query_provider=query_provider,
    )


def check_artifact_matches_task(doc: dict, task: TaskSpec, force: bool = False) -> None:
    problems = []
    if doc.get("task") != task.name:
        problems.append(f"artifact task {doc.get('task')!r} != configured task {task.name!r}")
    if doc.get("label_set_hash") != task.label_set_hash():
        problems.append("artifact label set differs from the configured task's")
    if problems and not force:
        raise ArtifactError("; ".join(problems) + " (use --force to override)")


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_json(path: str | Path, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def write_csv(path: str | Path, rows: Sequence[Sequence]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buffer.getvalue())


def load_artifact(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot load artifact {path}: {exc}") from exc
    kind = doc.get("kind")
    if kind not in (PROMPT_KIND, PLAN_KIND):
        raise ArtifactError(f"{path} is not a prompt or plan artifact (kind={kind!r})")
    stored = doc.get("content_hash")
    recomputed = sha256_of_json({k: v for k, v in doc.items() if k != "content_hash"})
    if stored != recomputed:
        raise ArtifactError(f"{path} failed its content-hash check; file may be corrupt")
    return doc


# ---------------------------------------------------------------------------
# Minimal SVG histogram (optional visual output; no plotting dependency)
# ---------------------------------------------------------------------------


def histogram_svg(
    title: str,
    labels: Sequence[str],
    counts: Sequence[float],
    width: int = 560,
    height: int = 280,
) -> str:
    if len(labels) != len(counts):
        raise ValueError("labels and counts must align")
    margin = 36
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    peak = max(max(counts), 1e-12)
    bar_w = plot_w / max(len(counts), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for i, (label, count) in enumerate(zip(labels, counts)):
        bar_h = plot_h * (count / peak)
        x = margin + i * bar_w
        y = height - margin - bar_h
        parts.append(
            f'<rect x="{x + 1:.1f}" y="{y:.1f}" width="{bar_w - 2:.1f}" '
            f'height="{bar_h:.1f}" fill="#4878a8"/>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{height - margin + 14}" '
            f'text-anchor="middle" font-size="9">{label}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{y - 3:.1f}" '
            f'text-anchor="middle" font-size="9">{count:g}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
