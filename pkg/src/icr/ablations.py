"""Ablation experiments around the selection loop.

Each experiment returns an AblationReport: a variant tag plus a
JSON-serializable payload, with every random choice seeded and recorded.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace as dc_replace
from typing import Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .backends import Backend
from .embeddings import EmbeddingProvider, cosine_distance
from .errors import SelectionError
from .evaluation import evaluate, predict
from .metrics import label_histogram
from .selection import (
    ICRConfig,
    SelectionResult,
    full_misconfidence_select,
    icr_init,
    icr_refine,
    icr_select,
    score_pool,
)
from .tasks import (
    Dataset,
    DemonstrationSet,
    Example,
    Provenance,
    TaskSpec,
    empty_demonstrations,
    stratified_subsample,
)

VARIANTS = (
    "iteration_sweep",
    "misconfidence_bins",
    "zero_shot_init",
    "full_misconfidence",
    "distance_analysis",
    "psi_case_study",
)


@dataclass(frozen=True)
class AblationReport:
    variant: str
    payload: dict
    config: dict

    def to_dict(self) -> dict:
        return {"variant": self.variant, "config": self.config, "payload": self.payload}


def _capped(pool: Dataset, config: ICRConfig) -> Dataset:
    if config.pool_cap is not None and len(pool) > config.pool_cap:
        return stratified_subsample(pool, config.pool_cap, config.seed)
    return pool


def _members_by_ids(examples: Sequence[Example], ids: Sequence[int], task: TaskSpec,
                    method: str, seed: int | None) -> DemonstrationSet:
    by_id = {e.id: e for e in examples}
    return DemonstrationSet(
        members=tuple(by_id[i] for i in ids),
        source_task=task.name,
        provenance=Provenance(method=method, seed=seed),
    )


def ablate_iterations(
    backend: Backend,
    task: TaskSpec,
    pool: Dataset,
    test: Dataset,
    config: ICRConfig,
    max_iterations: int,
    *,
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> AblationReport:
    """Evaluate the prompt after 0..K refinement rounds (0 = random init)."""
    if max_iterations < 1:
        raise SelectionError("iteration sweep needs at least one iteration")
    run_config = dc_replace(config, iterations=max_iterations)
    result = icr_select(
        backend, task, pool, run_config,
        skip_failures=skip_failures, parallelism=parallelism,
    )
    points = []
    for record in result.trace:
        demos = _members_by_ids(
            result.pool_examples, record.member_ids, task, "icr", config.seed
        )
        report = evaluate(
            backend, task, demos, test,
            skip_failures=skip_failures, parallelism=parallelism,
        )
        points.append(
            {
                "iteration": record.iteration,
                "member_ids": list(record.member_ids),
                "accuracy": report.accuracy,
                "macro_f1": report.macro_f1,
            }
        )
    return AblationReport(
        variant="iteration_sweep",
        payload={"points": points},
        config={**run_config.as_dict(), "max_iterations": max_iterations},
    )


def ablate_misconfidence_bins(
    backend: Backend,
    task: TaskSpec,
    pool: Dataset,
    test: Dataset,
    *,
    bins: int = 5,
    m: int = 16,
    seeds: Sequence[int] = (0, 1, 2),
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> AblationReport:
    """Relate prompt quality to the misconfidence level of its demonstrations.

    Pool examples are scored with an empty context, sorted by ascending
    misconfidence, and partitioned into ``bins`` quantile bins. One m-demo
    prompt per (bin, seed) is sampled uniformly within the bin and evaluated.
    """
    if bins < 1:
        raise SelectionError("need at least one bin")
    if len(pool) < bins * m:
        raise SelectionError(
            f"pool of {len(pool)} cannot fill {bins} bins of m={m} prompts"
        )
    scored = score_pool(
        backend, task, pool, empty_demonstrations(task),
        skip_failures=skip_failures, parallelism=parallelism,
    )
    ascending = sorted(scored.ranked, key=lambda rc: (rc.score.log_value, rc.example.id))
    n = len(ascending)
    edges = [round(j * n / bins) for j in range(bins + 1)]
    edges[0], edges[-1] = 0, n
    rows = []
    for b in range(bins):
        segment = ascending[edges[b] : edges[b + 1]]
        seg_scores = [rc.score.log_value for rc in segment]
        for seed in seeds:
            rng = random.Random(f"{seed}:{b}")
            picked = rng.sample(segment, m)
            demos = DemonstrationSet(
                members=tuple(rc.example for rc in picked),
                source_task=task.name,
                provenance=Provenance(method="bin-sample", seed=seed, extra={"bin": b}),
            )
            report = evaluate(
                backend, task, demos, test,
                skip_failures=skip_failures, parallelism=parallelism,
            )
            rows.append(
                {
                    "bin": b,
                    "seed": seed,
                    "bin_size": len(segment),
                    "bin_psi_mean": sum(seg_scores) / len(seg_scores),
                    "bin_psi_min": min(seg_scores),
                    "bin_psi_max": max(seg_scores),
                    "prompt_psi_mean": sum(rc.score.log_value for rc in picked) / m,
                    "member_ids": [rc.example.id for rc in picked],
                    "accuracy": report.accuracy,
                    "macro_f1": report.macro_f1,
                }
            )
    per_bin = []
    for b in range(bins):
        bin_rows = [r for r in rows if r["bin"] == b]
        per_bin.append(
            {
                "bin": b,
                "bin_size": bin_rows[0]["bin_size"],
                "bin_psi_mean": bin_rows[0]["bin_psi_mean"],
                "accuracy_mean": sum(r["accuracy"] for r in bin_rows) / len(bin_rows),
                "macro_f1_mean": sum(r["macro_f1"] for r in bin_rows) / len(bin_rows),
            }
        )
    return AblationReport(
        variant="misconfidence_bins",
        payload={
            "rows": rows,
            "per_bin": per_bin,
            "bin_boundaries": edges,
            "skipped_ids": list(scored.skipped_ids),
        },
        config={"bins": bins, "m": m, "seeds": list(seeds)},
    )


def _variant_entry(
    backend: Backend,
    task: TaskSpec,
    test: Dataset,
    result: SelectionResult,
    *,
    skip_failures: bool,
    parallelism: int | None,
) -> dict:
    report = evaluate(
        backend, task, result.demos, test,
        skip_failures=skip_failures, parallelism=parallelism,
    )
    member_labels = [e.label for e in result.demos.members]
    return {
        "member_ids": list(result.demos.member_ids()),
        "label_histogram": label_histogram(task.label_set.labels, member_labels),
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
    }


def ablate_variants(
    backend: Backend,
    task: TaskSpec,
    pool: Dataset,
    test: Dataset,
    config: ICRConfig,
    *,
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> tuple[AblationReport, AblationReport]:
    """Standard selection vs. two degraded builds: scoring candidates with an
    empty context, and taking the top-m misconfident examples outright.

    Returns one report per degraded build; both share the same standard run
    as the delta baseline.
    """
    kw = {"skip_failures": skip_failures, "parallelism": parallelism}
    standard = icr_select(backend, task, pool, config, **kw)
    zero_init = icr_select(backend, task, pool, config, scoring_context="zero-shot", **kw)
    full = full_misconfidence_select(backend, task, pool, config, **kw)
    entries = {
        "standard": _variant_entry(backend, task, test, standard, **kw),
        "zero_shot_init": _variant_entry(backend, task, test, zero_init, **kw),
        "full_misconfidence": _variant_entry(backend, task, test, full, **kw),
    }
    base = entries["standard"]
    for entry in entries.values():
        entry["delta_accuracy"] = entry["accuracy"] - base["accuracy"]
        entry["delta_macro_f1"] = entry["macro_f1"] - base["macro_f1"]
    reports = []
    for name in ("zero_shot_init", "full_misconfidence"):
        reports.append(
            AblationReport(
                variant=name,
                payload={"variants": {"standard": entries["standard"], name: entries[name]}},
                config=config.as_dict(),
            )
        )
    return reports[0], reports[1]


def ks_statistic(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Two-sample Kolmogorov-Smirnov statistic (sup distance of the ECDFs)."""
    return float(_scipy_stats.ks_2samp(sample_a, sample_b, method="asymp").statistic)


def distance_analysis(
    backend: Backend,
    task: TaskSpec,
    demos: DemonstrationSet,
    test: Dataset,
    provider: EmbeddingProvider,
    *,
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> AblationReport:
    """Check whether prediction flips between zero- and few-shot contexts
    relate to a query's embedding distance from the demonstrations."""
    demo_vectors = [provider.embed_example(e) for e in demos.members]
    zero = empty_demonstrations(task)
    cases = []
    for case in test:
        zero_pred = predict(backend, task, zero, case)
        few_pred = predict(backend, task, demos, case)
        query_vec = provider.embed_example(case)
        distance = min(cosine_distance(query_vec, dv) for dv in demo_vectors)
        cases.append(
            {
                "id": case.id,
                "distance": distance,
                "zero_shot_prediction": zero_pred,
                "few_shot_prediction": few_pred,
                "changed": zero_pred != few_pred,
            }
        )
    all_distances = [c["distance"] for c in cases]
    changed = [c["distance"] for c in cases if c["changed"]]
    ks = ks_statistic(all_distances, changed) if changed else None
    return AblationReport(
        variant="distance_analysis",
        payload={
            "cases": cases,
            "distances_all": all_distances,
            "distances_changed": changed,
            "changed_ids": [c["id"] for c in cases if c["changed"]],
            "ks_statistic": ks,
        },
        config={"provider_id": provider.provider_id, "n_demos": len(demos)},
    )


def psi_case_study(
    backend: Backend,
    task: TaskSpec,
    pool: Dataset,
    test: Dataset,
    config: ICRConfig,
    *,
    hist_bins: int = 10,
    skip_failures: bool = False,
    parallelism: int | None = None,
) -> AblationReport:
    """Per-label misconfidence histograms over the candidate pool under the
    initial prompt, plus confusion matrices before and after one refinement."""
    working = _capped(pool, config)
    if len(working) < config.m + config.n:
        raise SelectionError(
            f"pool of {len(working)} is too small for m={config.m}, n={config.n}"
        )
    initial = icr_init(working, config)
    initial = DemonstrationSet(
        members=initial.members, source_task=task.name, provenance=initial.provenance
    )
    demo_ids = set(initial.member_ids())
    candidates = [e for e in working if e.id not in demo_ids]
    scored = score_pool(
        backend, task, candidates, initial,
        skip_failures=skip_failures, parallelism=parallelism,
    )
    values = np.array([rc.score.log_value for rc in scored.ranked])
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    histograms = {}
    for label in task.label_set.labels:
        label_values = [
            rc.score.log_value for rc in scored.ranked if rc.example.label == label
        ]
        counts, edges = np.histogram(label_values, bins=hist_bins, range=(lo, hi))
        histograms[label] = {
            "edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
            "mean_psi": (sum(label_values) / len(label_values)) if label_values else None,
        }
    kw = {"skip_failures": skip_failures, "parallelism": parallelism}
    before = evaluate(backend, task, initial, test, **kw)
    refined, _ = icr_refine(initial, scored.ranked, config.n)
    after = evaluate(backend, task, refined, test, **kw)
    return AblationReport(
        variant="psi_case_study",
        payload={
            "psi_histograms": histograms,
            "initial_member_ids": list(initial.member_ids()),
            "refined_member_ids": list(refined.member_ids()),
            "confusion_before": [list(r) for r in before.confusion],
            "confusion_after": [list(r) for r in after.confusion],
            "confusion_labels": list(task.label_set.labels),
            "accuracy_before": before.accuracy,
            "accuracy_after": after.accuracy,
            "macro_f1_before": before.macro_f1,
            "macro_f1_after": after.macro_f1,
            "skipped_ids": list(scored.skipped_ids),
        },
        config={**config.as_dict(), "hist_bins": hist_bins},
    )
