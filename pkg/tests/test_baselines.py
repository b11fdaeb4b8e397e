"""Baselines: stratified uniform, best-of-N, and the retrieval methods."""

from collections import Counter

import pytest

from icr.backends import SyntheticBackend, SyntheticModelParams
from icr.baselines import (
    RetrievalPlan,
    ambig_retrieve,
    best_of_n_select,
    kate_retrieve,
    uniform_select,
)
from icr.embeddings import HashingEmbeddingProvider, cosine_distance
from icr.errors import SelectionError
from icr.tasks import Dataset, LabelSet, TaskSpec, empty_demonstrations

from conftest import make_dataset, make_examples


class TestUniformSelect:
    def test_largest_remainder_split(self):
        pool = make_dataset([(f"t{i} u{i}", "yes" if i < 70 else "no") for i in range(100)])
        demos = uniform_select(pool, 16, seed=4)
        counts = Counter(e.label for e in demos.members)
        assert counts == {"yes": 11, "no": 5}

    def test_one_per_label_at_minimum(self):
        pool = make_dataset([("a", "x"), ("b", "x"), ("c", "y"), ("d", "y")])
        demos = uniform_select(pool, 2, seed=0)
        assert Counter(e.label for e in demos.members) == {"x": 1, "y": 1}

    def test_frozen_seeded_ids(self, fixture_pool):
        # pins the sampling protocol: any change to rng usage shows up here
        assert uniform_select(fixture_pool, 4, 7).member_ids() == (5, 17, 18, 2)

    def test_histogram_within_one_of_proportional(self):
        pool = make_dataset(
            [(f"t{i} u{i}", ["a", "b", "c"][i % 3]) for i in range(31)]
        )
        for seed in range(5):
            demos = uniform_select(pool, 7, seed=seed)
            counts = Counter(e.label for e in demos.members)
            for label in ("a", "b", "c"):
                exact = 7 * sum(e.label == label for e in pool) / 31
                assert abs(counts.get(label, 0) - exact) < 1

    def test_preconditions(self, fixture_pool):
        with pytest.raises(SelectionError):
            uniform_select(fixture_pool, 21, seed=0)
        with pytest.raises(SelectionError):
            uniform_select(fixture_pool, 1, seed=0)


class TestBestOfN:
    def test_single_trial_is_identity(self, hate_task, fixture_pool, biased_backend):
        validation = make_dataset([("storm rage fire", "yes"), ("calm river stone", "no")], role="validation")
        chosen = best_of_n_select(
            biased_backend, hate_task, fixture_pool, 4, validation, trials=1, seed=3
        )
        assert chosen.member_ids() == uniform_select(fixture_pool, 4, seed=3).member_ids()

    def test_picks_argmax_of_recomputed_accuracies(self, hate_task, fixture_pool, biased_backend):
        validation = make_dataset(
            [
                ("storm rage fire", "yes"),
                ("fury wrath gale", "yes"),
                ("calm river stone", "no"),
                ("soft dawn mist", "no"),
                ("wrath howl blast", "yes"),
            ],
            role="validation",
        )
        trials, seed = 6, 11
        chosen = best_of_n_select(
            biased_backend, hate_task, fixture_pool, 4, validation, trials=trials, seed=seed
        )
        # brute force: recompute the accuracy of every trial's set directly
        accuracies = []
        for t in range(trials):
            demos = uniform_select(fixture_pool, 4, seed=seed + t)
            correct = 0
            for case in validation:
                dist = biased_backend.label_distribution(hate_task, demos, case.fields)
                correct += dist.argmax(hate_task.label_set.labels) == case.label
            accuracies.append(correct / len(validation))
        best_trial = accuracies.index(max(accuracies))
        expected = uniform_select(fixture_pool, 4, seed=seed + best_trial)
        assert chosen.member_ids() == expected.member_ids()
        assert chosen.provenance.extra["trial_scores"] == accuracies
        assert max(accuracies) >= max(a for i, a in enumerate(accuracies) if i != best_trial)

    def test_tie_goes_to_lowest_trial(self, hate_task, fixture_pool):
        # alpha 0 and no bias: every prompt scores identically
        flat = SyntheticBackend(SyntheticModelParams(alpha=0.0))
        validation = make_dataset([("anything", "no")], role="validation")
        chosen = best_of_n_select(
            flat, hate_task, fixture_pool, 4, validation, trials=4, seed=9
        )
        assert chosen.provenance.extra["chosen_trial"] == 0
        assert chosen.member_ids() == uniform_select(fixture_pool, 4, seed=9).member_ids()


def hashing_plan(pool, method="kate", k=3, task_name="toy-hate"):
    return RetrievalPlan(
        method=method,
        k=k,
        provider=HashingEmbeddingProvider(),
        pool=pool.examples if isinstance(pool, Dataset) else tuple(pool),
        task_name=task_name,
    )


class TestKate:
    def test_identical_text_is_nearest(self, fixture_pool):
        plan = hashing_plan(fixture_pool, k=3)
        demos = kate_retrieve(plan, {"text": "storm rage fire"})
        # nearest is rendered last
        assert demos.members[-1].fields["text"] == "storm rage fire"

    def test_matches_exhaustive_scan(self, fixture_pool):
        plan = hashing_plan(fixture_pool, k=4)
        provider = HashingEmbeddingProvider()
        for query in ("storm gale night", "quiet meadow walk", "calm fire blast"):
            demos = kate_retrieve(plan, {"text": query})
            qv = provider.embed_text(query)
            dists = sorted(
                (cosine_distance(qv, provider.embed_text(e.fields["text"])), e.id)
                for e in fixture_pool
            )
            expected_ids = {i for _, i in dists[:4]}
            assert set(demos.member_ids()) == expected_ids
            # ordering: descending distance toward the query block
            ordered = [d for d, _ in sorted(dists[:4], reverse=True)]
            got = [
                cosine_distance(qv, provider.embed_text(e.fields["text"]))
                for e in demos.members
            ]
            assert got == pytest.approx(ordered)

    def test_k_equals_pool(self, fixture_pool):
        plan = hashing_plan(fixture_pool, k=20)
        demos = kate_retrieve(plan, {"text": "storm"})
        assert len(demos) == 20
        assert sorted(demos.member_ids()) == list(range(20))

    def test_k_over_pool_errors(self, fixture_pool):
        plan = hashing_plan(fixture_pool, k=21)
        with pytest.raises(SelectionError):
            kate_retrieve(plan, {"text": "storm"})


class TestAmbig:
    def test_binary_reduces_to_kate(self, hate_task, fixture_pool, biased_backend):
        plan_k = hashing_plan(fixture_pool, "kate", k=5)
        plan_a = hashing_plan(fixture_pool, "ambig", k=5)
        for query in ("storm gale night", "quiet meadow walk"):
            kate = kate_retrieve(plan_k, {"text": query})
            ambig = ambig_retrieve(plan_a, biased_backend, hate_task, {"text": query})
            assert ambig.member_ids() == kate.member_ids()

    def test_four_label_filtering(self, emotion_task):
        # zero-shot biases pin the top-2 predictions to anger and joy
        backend = SyntheticBackend(
            SyntheticModelParams(bias={"anger": 2.0, "joy": 1.0}, alpha=4.0)
        )
        rows = [
            ("rage boil fury", "anger"),
            ("sharp spite words", "anger"),
            ("bright smile laugh", "joy"),
            ("warm happy grin", "joy"),
            ("hope rising path", "optimism"),
            ("bright future ahead", "optimism"),
            ("tears heavy rain", "sadness"),
            ("grey lonely night", "sadness"),
        ]
        pool = make_dataset(rows)
        zero = backend.label_distribution(
            emotion_task, empty_demonstrations(emotion_task), {"text": "bright words"}
        )
        assert zero.top_labels(emotion_task.label_set.labels, 2) == ["anger", "joy"]
        plan = hashing_plan(pool, "ambig", k=4, task_name="toy-emotion")
        demos = ambig_retrieve(plan, backend, emotion_task, {"text": "bright words"})
        assert {e.label for e in demos.members} <= {"anger", "joy"}
        assert demos.provenance.extra["backfilled"] == 0

    def test_backfill_when_filtered_short(self, emotion_task):
        backend = SyntheticBackend(
            SyntheticModelParams(bias={"anger": 2.0, "joy": 1.0}, alpha=4.0)
        )
        rows = [
            ("rage boil fury", "anger"),
            ("bright smile laugh", "joy"),
            ("hope rising path", "optimism"),
            ("bright future ahead", "optimism"),
            ("tears heavy rain", "sadness"),
        ]
        pool = make_dataset(rows)
        plan = hashing_plan(pool, "ambig", k=3, task_name="toy-emotion")
        demos = ambig_retrieve(plan, backend, emotion_task, {"text": "bright words"})
        assert len(demos) == 3
        labels = [e.label for e in demos.members]
        assert sum(l in ("anger", "joy") for l in labels) == 2
        assert demos.provenance.extra["backfilled"] == 1
