"""Misconfidence scoring and the ICR demonstration-selection loop.

Misconfidence of a labeled example under a model context is the ratio of the
highest probability given to any incorrect label to the probability of the
gold label. Scores live in log space: positive means the example is
confidently misjudged, negative means it is judged correctly. ICR starts
from a random prompt and repeatedly replaces its front with the most
misconfident candidates from the pool.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Sequence

from .backends import Backend, LabelDistribution, ordered_map, resolve_parallelism
from .errors import ConfigError, IcrError, SelectionError
from .tasks import (
    Dataset,
    DemonstrationSet,
    Example,
    Provenance,
    TaskSpec,
    empty_demonstrations,
    stratified_sample_ids,
    stratified_subsample,
)

INIT_MODES = ("uniform", "stratified")
SCORING_CONTEXTS = ("few-shot", "zero-shot")


@dataclass(frozen=True)
class MisconfidenceScore:
    """Log of the misconfidence ratio, tagged with the scored example id."""

    log_value: float
    example_id: int

    @property
    def ratio(self) -> float:
        return math.exp(self.log_value)


def misconfidence(
    dist: LabelDistribution, gold: str, example_id: int = -1
) -> MisconfidenceScore:
    """log(max probability of any incorrect label) - log(gold probability)."""
    if gold not in dist.probs:
        raise ValueError(f"gold label {gold!r} not in distribution {sorted(dist.probs)}")
    if len(dist.probs) < 2:
        raise ValueError("misconfidence needs at least two labels")
    best_incorrect = max(p for label, p in dist.probs.items() if label != gold)
    log_value = math.log(best_incorrect) - math.log(dist.probs[gold])
    return MisconfidenceScore(log_value=log_value, example_id=example_id)


@dataclass(frozen=True)
class RankedCandidate:
    example: Example
    score: MisconfidenceScore
    rank: int


@dataclass(frozen=True)
class ICRConfig:
    """Knobs of the selection loop; defaults follow the standard protocol."""

    m: int = 16
    n: int = 8
    iterations: int = 1
    seed: int = 0
    pool_cap: int | None = 500
    init_mode: str = "uniform"

    def __post_init__(self):
        if not 1 <= self.n <= self.m:
            raise ConfigError(f"replacement count n={self.n} must satisfy 1 <= n <= m={self.m}")
        if self.iterations < 1:
            raise ConfigError("iteration count must be >= 1")
        if self.pool_cap is not None and self.pool_cap < self.m + self.n:
            raise ConfigError(
                f"pool cap {self.pool_cap} is below m + n = {self.m + self.n}"
            )
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}")

    def as_dict(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "iterations": self.iterations,
            "seed": self.seed,
            "pool_cap": self.pool_cap,
            "init_mode": self.init_mode,
        }


@dataclass(frozen=True)
class PsiSummary:
    """Distribution of log-misconfidence over one scored candidate pool."""

    count: int
    mean: float
    min: float
    max: float
    selected_mean: float | None = None

    @staticmethod
    def from_scores(values: Sequence[float], selected: Sequence[float] = ()) -> "PsiSummary":
        return PsiSummary(
            count=len(values),
            mean=sum(values) / len(values),
            min=min(values),
            max=max(values),
            selected_mean=sum(selected) / len(selected) if selected else None,
        )


@dataclass(frozen=True)
class ScoredPool:
    ranked: tuple[RankedCandidate, ...]
    skipped_ids: tuple[int, ...] = ()


def score_pool(
    backend: Backend,
    task: TaskSpec,
    pool: Dataset | Sequence[Example],
    context: DemonstrationSet,
    *,
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> ScoredPool:
    """Score every pool example against its gold label under ``context``.

    One model interaction per candidate. Ranking is by descending
    log-misconfidence with ascending example id as the tiebreak. A backend
    failure aborts the whole operation naming the candidate, unless
    ``skip_failures`` collects the ids instead.
    """
    examples = tuple(pool.examples if isinstance(pool, Dataset) else pool)
    context_ids = set(context.member_ids())
    overlap = sorted(context_ids & {e.id for e in examples})
    if overlap:
        raise SelectionError(f"pool and context share example ids {overlap}")

    def worker(example: Example):
        try:
            dist = backend.label_distribution(task, context, example.fields)
            return misconfidence(dist, example.label, example.id)
        except IcrError as exc:
            return (example.id, exc)

    results = ordered_map(worker, examples, resolve_parallelism(backend, parallelism))
    scores: list[MisconfidenceScore] = []
    skipped: list[int] = []
    for outcome in results:
        if isinstance(outcome, MisconfidenceScore):
            scores.append(outcome)
        else:
            candidate_id, exc = outcome
            if not skip_failures:
                raise SelectionError(
                    f"scoring failed: {exc}", candidate_id=candidate_id
                ) from exc
            skipped.append(candidate_id)
    by_id = {e.id: e for e in examples}
    scores.sort(key=lambda s: (-s.log_value, s.example_id))
    ranked = tuple(
        RankedCandidate(example=by_id[s.example_id], score=s, rank=i + 1)
        for i, s in enumerate(scores)
    )
    return ScoredPool(ranked=ranked, skipped_ids=tuple(skipped))


def icr_init(pool: Dataset | Sequence[Example], config: ICRConfig) -> DemonstrationSet:
    """Draw the initial m demonstrations by seed: plain uniform or stratified."""
    examples = list(pool.examples if isinstance(pool, Dataset) else pool)
    if len(examples) < config.m:
        raise SelectionError(f"pool of {len(examples)} cannot seed m={config.m} demonstrations")
    rng = random.Random(config.seed)
    if config.init_mode == "uniform":
        members = rng.sample(examples, config.m)
    else:
        labels = sorted({e.label for e in examples})
        ids = set(stratified_sample_ids(examples, config.m, rng, labels))
        members = [e for e in examples if e.id in ids]
        rng.shuffle(members)
    return DemonstrationSet(
        members=tuple(members),
        source_task="",
        provenance=Provenance(method="icr-init", seed=config.seed),
    )


def icr_refine(
    demos: DemonstrationSet,
    ranked: Sequence[RankedCandidate],
    n: int,
) -> tuple[DemonstrationSet, list[Example]]:
    """Replace the first n demonstrations with the top-n ranked candidates.

    New members lead the prompt in descending-misconfidence order; kept
    members preserve their previous order. Returns the refined set and the
    replaced examples (which re-enter the candidate pool).
    """
    if len(ranked) < n:
        raise SelectionError(f"need {n} ranked candidates, have {len(ranked)}")
    if n > len(demos):
        raise SelectionError(f"cannot replace {n} of {len(demos)} demonstrations")
    incoming = [rc.example for rc in ranked[:n]]
    overlap = {e.id for e in incoming} & set(demos.member_ids())
    if overlap:
        raise SelectionError(f"ranked candidates overlap demonstrations: {sorted(overlap)}")
    kept = list(demos.members[n:])
    replaced = list(demos.members[:n])
    prov = demos.provenance
    refined = DemonstrationSet(
        members=tuple(incoming + kept),
        source_task=demos.source_task,
        provenance=replace(prov, iterations=prov.iterations + 1),
    )
    return refined, replaced


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    member_ids: tuple[int, ...]
    replaced_ids: tuple[int, ...] = ()
    added_ids: tuple[int, ...] = ()
    psi: PsiSummary | None = None


@dataclass(frozen=True)
class SelectionResult:
    demos: DemonstrationSet
    trace: tuple[IterationRecord, ...]
    pool_examples: tuple[Example, ...]
    skipped_ids: tuple[int, ...] = ()


def icr_select(
    backend: Backend,
    task: TaskSpec,
    pool: Dataset,
    config: ICRConfig,
    *,
    scoring_context: str = "few-shot",
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> SelectionResult:
    """Run the full selection loop and return the prompt plus its trace.

    Each iteration scores the candidate pool (which always excludes current
    demonstrations), replaces the prompt's first n members with the top-n
    candidates, and returns the replaced ones to the pool.
    ``scoring_context="zero-shot"`` scores candidates with an empty context
    instead of the current prompt (an ablation mode).
    """
    if scoring_context not in SCORING_CONTEXTS:
        raise ConfigError(f"scoring_context must be one of {SCORING_CONTEXTS}")
    working = pool
    if config.pool_cap is not None and len(pool) > config.pool_cap:
        working = stratified_subsample(pool, config.pool_cap, config.seed)
    if len(working) < config.m + config.n:
        raise SelectionError(
            f"pool of {len(working)} is too small for m={config.m}, n={config.n}"
        )
    demos = icr_init(working, config)
    demo_ids = set(demos.member_ids())
    candidates = [e for e in working if e.id not in demo_ids]
    trace = [IterationRecord(iteration=0, member_ids=demos.member_ids())]
    skipped: list[int] = []
    for i in range(1, config.iterations + 1):
        context = demos if scoring_context == "few-shot" else empty_demonstrations(task)
        scored = score_pool(
            backend,
            task,
            candidates,
            context,
            skip_failures=skip_failures,
            parallelism=parallelism,
        )
        skipped.extend(scored.skipped_ids)
        demos, replaced = icr_refine(demos, scored.ranked, config.n)
        added_ids = tuple(rc.example.id for rc in scored.ranked[: config.n])
        candidates = [c for c in candidates if c.id not in set(added_ids)] + replaced
        log_values = [rc.score.log_value for rc in scored.ranked]
        trace.append(
            IterationRecord(
                iteration=i,
                member_ids=demos.member_ids(),
                replaced_ids=tuple(e.id for e in replaced),
                added_ids=added_ids,
                psi=PsiSummary.from_scores(log_values, log_values[: config.n]),
            )
        )
    final = DemonstrationSet(
        members=demos.members,
        source_task=task.name,
        provenance=Provenance(
            method="icr",
            seed=config.seed,
            iterations=config.iterations,
            extra={"init_mode": config.init_mode, "scoring_context": scoring_context},
        ),
    )
    return SelectionResult(
        demos=final,
        trace=tuple(trace),
        pool_examples=working.examples,
        skipped_ids=tuple(skipped),
    )


def full_misconfidence_select(
    backend: Backend,
    task: TaskSpec,
    pool: Dataset,
    config: ICRConfig,
    *,
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> SelectionResult:
    """Ablation selector: the m most misconfident pool examples under an
    empty context, with no replacement loop."""
    working = pool
    if config.pool_cap is not None and len(pool) > config.pool_cap:
        working = stratified_subsample(pool, config.pool_cap, config.seed)
    if len(working) < config.m:
        raise SelectionError(f"pool of {len(working)} is too small for m={config.m}")
    scored = score_pool(
        backend,
        task,
        working,
        empty_demonstrations(task),
        skip_failures=skip_failures,
        parallelism=parallelism,
    )
    top = scored.ranked[: config.m]
    if len(top) < config.m:
        raise SelectionError(f"only {len(top)} candidates scored, need m={config.m}")
    demos = DemonstrationSet(
        members=tuple(rc.example for rc in top),
        source_task=task.name,
        provenance=Provenance(
            method="full-misconfidence", seed=config.seed, iterations=0
        ),
    )
    log_values = [rc.score.log_value for rc in scored.ranked]
    trace = (
        IterationRecord(
            iteration=0,
            member_ids=demos.member_ids(),
            added_ids=demos.member_ids(),
            psi=PsiSummary.from_scores(log_values, log_values[: config.m]),
        ),
    )
    return SelectionResult(
        demos=demos,
        trace=trace,
        pool_examples=working.examples,
        skipped_ids=scored.skipped_ids,
    )
