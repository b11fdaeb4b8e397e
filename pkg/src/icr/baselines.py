"""Reference selection methods the ICR loop is compared against.

Fixed-prompt methods: stratified uniform sampling and best-of-N (sample N
uniform sets, keep the one that scores best on a held-out validation split).
Per-query retrieval methods: nearest-neighbor retrieval over embeddings
(optionally restricted to the labels of the query's top-2 zero-shot
predictions, with nearest-neighbor backfill when the restriction leaves
fewer than k candidates).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .backends import Backend
from .embeddings import EmbeddingProvider, EmbeddingVector, cosine_distance
from .errors import ConfigError, SelectionError
from .metrics import accuracy_of, compute_report
from .tasks import (
    Dataset,
    DemonstrationSet,
    Example,
    Provenance,
    TaskSpec,
    empty_demonstrations,
    example_text,
    stratified_sample_ids,
)


def uniform_select(
    pool: Dataset | Sequence[Example], m: int, seed: int, task_name: str = ""
) -> DemonstrationSet:
    """Stratified uniform sample of m demonstrations, order shuffled by seed."""
    examples = list(pool.examples if isinstance(pool, Dataset) else pool)
    labels = sorted({e.label for e in examples})
    if m > len(examples):
        raise SelectionError(f"cannot draw {m} demonstrations from a pool of {len(examples)}")
    if m < len(labels):
        raise SelectionError(
            f"m={m} is below the number of labels ({len(labels)}); "
            "cannot preserve the label distribution"
        )
    rng = random.Random(seed)
    ids = set(stratified_sample_ids(examples, m, rng, labels))
    members = [e for e in examples if e.id in ids]
    rng.shuffle(members)
    return DemonstrationSet(
        members=tuple(members),
        source_task=task_name,
        provenance=Provenance(method="uniform", seed=seed),
    )


def best_of_n_select(
    backend: Backend,
    task: TaskSpec,
    pool: Dataset,
    m: int,
    validation: Dataset,
    *,
    trials: int = 10,
    seed: int = 0,
    metric: str = "accuracy",
) -> DemonstrationSet:
    """Sample ``trials`` uniform sets (seeds seed..seed+trials-1), keep the one
    with the best validation score; ties go to the lowest trial index.

    The caller is responsible for keeping the validation split disjoint from
    the pool.
    """
    if trials < 1:
        raise ConfigError("best-of-n needs at least one trial")
    if metric not in ("accuracy", "macro_f1"):
        raise ConfigError(f"unknown best-of-n metric {metric!r}")
    best: DemonstrationSet | None = None
    best_score = -1.0
    trial_scores = []
    for t in range(trials):
        candidate = uniform_select(pool, m, seed + t)
        gold, predicted = [], []
        for case in validation:
            dist = backend.label_distribution(task, candidate, case.fields)
            gold.append(case.label)
            predicted.append(dist.argmax(task.label_set.labels))
        if metric == "accuracy":
            score = accuracy_of(gold, predicted)
        else:
            score = compute_report(task.name, task.label_set.labels, gold, predicted).macro_f1
        trial_scores.append(score)
        if score > best_score:
            best, best_score = candidate, score
    assert best is not None
    return DemonstrationSet(
        members=best.members,
        source_task=task.name,
        provenance=Provenance(
            method="best-of-10",
            seed=seed,
            extra={
                "trials": trials,
                "metric": metric,
                "trial_scores": trial_scores,
                "chosen_trial": trial_scores.index(best_score),
            },
        ),
    )


@dataclass
class RetrievalPlan:
    """A per-query demonstration rule: embed, rank the pool, take k."""

    method: str  # "kate" | "ambig"
    k: int
    provider: EmbeddingProvider
    pool: tuple[Example, ...]
    task_name: str
    query_provider: EmbeddingProvider | None = None
    _pool_vectors: dict[int, EmbeddingVector] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.method not in ("kate", "ambig"):
            raise ConfigError(f"unknown retrieval method {self.method!r}")
        if self.k < 1:
            raise ConfigError("retrieval k must be >= 1")
        if not self.pool:
            raise SelectionError("retrieval pool is empty")

    def pool_vector(self, example: Example) -> EmbeddingVector:
        if example.id not in self._pool_vectors:
            self._pool_vectors[example.id] = self.provider.embed_example(example)
        return self._pool_vectors[example.id]

    def query_vector(self, query: Example | Mapping[str, str]) -> EmbeddingVector:
        provider = self.query_provider or self.provider
        if isinstance(query, Example):
            return provider.embed_example(query)
        return provider.embed_text(example_text(query))


def _query_fields(query: Example | Mapping[str, str]) -> Mapping[str, str]:
    return query.fields if isinstance(query, Example) else query


def _distances(plan: RetrievalPlan, query_vec: EmbeddingVector) -> dict[int, float]:
    return {e.id: cosine_distance(query_vec, plan.pool_vector(e)) for e in plan.pool}


def _prompt_order(members: list[Example], dist: dict[int, float]) -> list[Example]:
    # nearest example ends up adjacent to the query block
    return sorted(members, key=lambda e: (-dist[e.id], e.id))


def kate_retrieve(plan: RetrievalPlan, query: Example | Mapping[str, str]) -> DemonstrationSet:
    """k nearest pool examples by cosine distance, nearest rendered last."""
    if plan.k > len(plan.pool):
        raise SelectionError(f"k={plan.k} exceeds pool size {len(plan.pool)}")
    dist = _distances(plan, plan.query_vector(query))
    nearest = sorted(plan.pool, key=lambda e: (dist[e.id], e.id))[: plan.k]
    members = _prompt_order(nearest, dist)
    return DemonstrationSet(
        members=tuple(members),
        source_task=plan.task_name,
        provenance=Provenance(method="kate", extra={"k": plan.k}),
    )


def ambig_retrieve(
    plan: RetrievalPlan,
    backend: Backend,
    task: TaskSpec,
    query: Example | Mapping[str, str],
) -> DemonstrationSet:
    """Nearest neighbors among candidates whose gold label is in the query's
    top-2 zero-shot predictions; backfills with unrestricted neighbors when
    the restriction leaves fewer than k."""
    if plan.k > len(plan.pool):
        raise SelectionError(f"k={plan.k} exceeds pool size {len(plan.pool)}")
    fields = _query_fields(query)
    zero_shot = backend.label_distribution(task, empty_demonstrations(task), fields)
    ambiguity = zero_shot.top_labels(task.label_set.labels, 2)
    dist = _distances(plan, plan.query_vector(query))
    eligible = [e for e in plan.pool if e.label in ambiguity]
    others = [e for e in plan.pool if e.label not in ambiguity]
    chosen = sorted(eligible, key=lambda e: (dist[e.id], e.id))[: plan.k]
    backfilled = 0
    if len(chosen) < plan.k:
        backfill = sorted(others, key=lambda e: (dist[e.id], e.id))[: plan.k - len(chosen)]
        backfilled = len(backfill)
        chosen.extend(backfill)
    members = _prompt_order(chosen, dist)
    return DemonstrationSet(
        members=tuple(members),
        source_task=plan.task_name,
        provenance=Provenance(
            method="ambig",
            extra={"k": plan.k, "ambiguity_labels": ambiguity, "backfilled": backfilled},
        ),
    )


def retrieve(
    plan: RetrievalPlan,
    backend: Backend,
    task: TaskSpec,
    query: Example | Mapping[str, str],
) -> DemonstrationSet:
    if plan.method == "kate":
        return kate_retrieve(plan, query)
    return ambig_retrieve(plan, backend, task, query)
