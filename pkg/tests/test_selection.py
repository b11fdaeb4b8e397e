"""Selection core: misconfidence arithmetic, ranking, and the refine loop."""

import math
import random
from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icr.backends import LabelDistribution, SyntheticBackend, SyntheticModelParams, synthetic_score
from icr.errors import ConfigError, SelectionError
from icr.selection import (
    ICRConfig,
    icr_init,
    icr_refine,
    icr_select,
    misconfidence,
    score_pool,
)
from icr.tasks import DemonstrationSet, Provenance, empty_demonstrations

from conftest import make_dataset, make_examples


def dist_of(probs):
    return LabelDistribution(probs=probs, source="synthetic")


class TestMisconfidence:
    def test_symmetric_tie_is_zero(self):
        score = misconfidence(dist_of({"a": 0.5, "b": 0.5}), "a")
        assert score.log_value == 0.0
        assert score.ratio == 1.0

    def test_ratio_three(self):
        score = misconfidence(dist_of({"yes": 0.2, "no": 0.6, "maybe": 0.2}), "yes")
        assert score.log_value == pytest.approx(math.log(3.0), abs=1e-12)

    def test_ratio_below_one_negative(self):
        score = misconfidence(dist_of({"a": 0.7, "b": 0.2, "c": 0.1}), "a")
        assert score.log_value == pytest.approx(math.log(2 / 7), abs=1e-12)
        assert score.log_value < 0

    def test_gold_absent_raises(self):
        with pytest.raises(ValueError):
            misconfidence(dist_of({"a": 0.5, "b": 0.5}), "zzz")

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6),
        st.integers(0, 5),
    )
    def test_sign_matches_misclassification(self, weights, gold_pick):
        total = sum(weights)
        labels = [f"l{i}" for i in range(len(weights))]
        probs = {l: w / total for l, w in zip(labels, weights)}
        gold = labels[gold_pick % len(labels)]
        score = misconfidence(dist_of(probs), gold)
        top = max(probs.values())
        if score.log_value > 0:
            assert probs[gold] < top
        elif score.log_value < 0:
            assert probs[gold] == top


class TestScorePool:
    def test_zero_context_matches_direct_recomputation(self, hate_task, fixture_pool, biased_backend):
        scored = score_pool(
            biased_backend, hate_task, fixture_pool, empty_demonstrations(hate_task)
        )
        # brute force: recompute each candidate's score independently
        expected = []
        for e in fixture_pool:
            d = synthetic_score(biased_backend.params, (), e.fields["text"], hate_task.label_set)
            ratio = max(p for l, p in d.probs.items() if l != e.label) / d.probs[e.label]
            expected.append((e.id, ratio))
        expected.sort(key=lambda t: (-t[1], t[0]))
        assert [rc.example.id for rc in scored.ranked] == [i for i, _ in expected]
        assert [rc.rank for rc in scored.ranked] == list(range(1, len(fixture_pool) + 1))

    def test_few_shot_context_matches_direct_recomputation(self, hate_task, fixture_pool, biased_backend):
        context_members = make_examples([("calm signal", "no"), ("storm signal", "yes")])
        context = DemonstrationSet(
            members=tuple(
                replace(e, id=100 + e.id) for e in context_members
            ),
            source_task=hate_task.name,
            provenance=Provenance("manual"),
        )
        scored = score_pool(biased_backend, hate_task, fixture_pool, context)
        for rc in scored.ranked:
            d = synthetic_score(
                biased_backend.params, context, rc.example.fields["text"], hate_task.label_set
            )
            direct = misconfidence(d, rc.example.label, rc.example.id)
            assert rc.score.log_value == pytest.approx(direct.log_value, abs=1e-12)

    def test_identical_candidates_tie_broken_by_id(self, hate_task, biased_backend):
        pool = make_dataset([("same words", "yes"), ("same words", "yes")])
        scored = score_pool(biased_backend, hate_task, pool, empty_demonstrations(hate_task))
        assert [rc.example.id for rc in scored.ranked] == [0, 1]
        assert scored.ranked[0].score.log_value == scored.ranked[1].score.log_value

    def test_overlap_with_context_rejected(self, hate_task, fixture_pool, biased_backend):
        context = DemonstrationSet(
            members=(fixture_pool.examples[0],),
            source_task=hate_task.name,
            provenance=Provenance("manual"),
        )
        with pytest.raises(SelectionError, match="share example ids"):
            score_pool(biased_backend, hate_task, fixture_pool, context)

    def test_failures_carry_candidate_id(self, hate_task, fixture_pool):
        class Flaky(SyntheticBackend):
            def label_distribution_with_raw(self, task, demos, query_fields):
                if query_fields["text"].startswith("soft dawn mist"):
                    from icr.errors import BackendError

                    raise BackendError("boom")
                return super().label_distribution_with_raw(task, demos, query_fields)

        backend = Flaky(SyntheticModelParams())
        with pytest.raises(SelectionError, match="candidate id 4"):
            score_pool(backend, hate_task, fixture_pool, empty_demonstrations(hate_task))
        scored = score_pool(
            backend, hate_task, fixture_pool, empty_demonstrations(hate_task), skip_failures=True
        )
        assert scored.skipped_ids == (4,)
        assert len(scored.ranked) == len(fixture_pool) - 1

    def test_parallel_matches_serial(self, hate_task, fixture_pool, biased_backend):
        serial = score_pool(
            biased_backend, hate_task, fixture_pool, empty_demonstrations(hate_task), parallelism=1
        )
        parallel = score_pool(
            biased_backend, hate_task, fixture_pool, empty_demonstrations(hate_task), parallelism=8
        )
        assert [rc.example.id for rc in serial.ranked] == [rc.example.id for rc in parallel.ranked]


class TestInit:
    def test_uniform_deterministic(self, fixture_pool):
        cfg = ICRConfig(m=4, n=2, seed=11, pool_cap=None)
        a = icr_init(fixture_pool, cfg)
        b = icr_init(fixture_pool, cfg)
        assert a.member_ids() == b.member_ids()
        assert len(set(a.member_ids())) == 4

    def test_m_equals_pool_size(self, fixture_pool):
        cfg = ICRConfig(m=20, n=1, seed=3, pool_cap=None)
        demos = icr_init(fixture_pool, cfg)
        assert sorted(demos.member_ids()) == list(range(20))

    def test_stratified_counts(self):
        pool = make_dataset([(f"t{i} u{i}", "yes" if i < 70 else "no") for i in range(100)])
        cfg = ICRConfig(m=10, n=2, seed=5, pool_cap=None, init_mode="stratified")
        demos = icr_init(pool, cfg)
        counts = Counter(e.label for e in demos.members)
        assert counts == {"yes": 7, "no": 3}

    def test_pool_too_small(self, fixture_pool):
        cfg = ICRConfig(m=21, n=1, seed=0, pool_cap=None)
        with pytest.raises(SelectionError):
            icr_init(fixture_pool, cfg)


class TestRefine:
    def test_literal_replacement_rule(self, hate_task, biased_backend):
        pool = make_dataset(
            [("d one", "no"), ("d two", "no"), ("c five storm", "yes"), ("c three storm", "yes")]
        )
        d1, d2, c5, c3 = pool.examples
        demos = DemonstrationSet(
            members=(d1, d2), source_task=hate_task.name, provenance=Provenance("manual")
        )
        scored = score_pool(biased_backend, hate_task, [c5, c3], demos)
        refined, replaced = icr_refine(demos, scored.ranked, 1)
        assert refined.member_ids() == (scored.ranked[0].example.id, d2.id)
        assert [e.id for e in replaced] == [d1.id]

    def test_full_replacement(self, hate_task, fixture_pool, biased_backend):
        demos = icr_init(fixture_pool, ICRConfig(m=3, n=3, seed=2, pool_cap=None))
        rest = [e for e in fixture_pool if e.id not in demos.member_ids()]
        scored = score_pool(biased_backend, hate_task, rest, demos)
        refined, replaced = icr_refine(demos, scored.ranked, 3)
        assert refined.member_ids() == tuple(rc.example.id for rc in scored.ranked[:3])
        assert [e.id for e in replaced] == list(demos.member_ids())

    def test_not_enough_candidates(self, hate_task, fixture_pool, biased_backend):
        demos = icr_init(fixture_pool, ICRConfig(m=2, n=2, seed=2, pool_cap=None))
        with pytest.raises(SelectionError):
            icr_refine(demos, (), 1)


class TestConfig:
    def test_bounds(self):
        with pytest.raises(ConfigError):
            ICRConfig(m=16, n=20)
        with pytest.raises(ConfigError):
            ICRConfig(m=4, n=0)
        with pytest.raises(ConfigError):
            ICRConfig(m=4, n=2, iterations=0)
        with pytest.raises(ConfigError):
            ICRConfig(m=16, n=8, pool_cap=20)
        with pytest.raises(ConfigError):
            ICRConfig(init_mode="fancy")


class TestSelectLoop:
    def test_trace_shape_and_disjointness(self, hate_task, fixture_pool, biased_backend):
        cfg = ICRConfig(m=4, n=2, iterations=3, seed=7, pool_cap=None)
        result = icr_select(biased_backend, hate_task, fixture_pool, cfg)
        assert len(result.trace) == 4
        pool_ids = {e.id for e in fixture_pool}
        for record in result.trace:
            assert len(record.member_ids) == 4
            assert set(record.member_ids) <= pool_ids
        assert result.demos.member_ids() == result.trace[-1].member_ids

    def test_determinism(self, hate_task, fixture_pool, biased_backend):
        cfg = ICRConfig(m=4, n=2, iterations=2, seed=13, pool_cap=None)
        a = icr_select(biased_backend, hate_task, fixture_pool, cfg)
        b = icr_select(SyntheticBackend(biased_backend.params), hate_task, fixture_pool, cfg)
        assert a.demos.member_ids() == b.demos.member_ids()
        assert a.trace == b.trace

    def test_one_interaction_per_candidate(self, hate_task, fixture_pool, biased_params):
        backend = SyntheticBackend(biased_params)
        cfg = ICRConfig(m=4, n=2, iterations=1, seed=7, pool_cap=None)
        icr_select(backend, hate_task, fixture_pool, cfg)
        assert backend.calls == len(fixture_pool) - 4

    def test_pool_cap_applied(self, hate_task, biased_backend):
        pool = make_dataset([(f"text number {i} tok{i % 7}", "no" if i % 4 else "yes") for i in range(60)])
        cfg = ICRConfig(m=4, n=2, iterations=1, seed=1, pool_cap=30)
        result = icr_select(biased_backend, hate_task, pool, cfg)
        assert len(result.pool_examples) == 30

    def test_pool_too_small_for_m_plus_n(self, hate_task, biased_backend):
        pool = make_dataset([(f"t{i}", "no" if i % 2 else "yes") for i in range(5)])
        cfg = ICRConfig(m=4, n=2, iterations=1, seed=1, pool_cap=None)
        with pytest.raises(SelectionError):
            icr_select(biased_backend, hate_task, pool, cfg)

    def test_zero_shot_scoring_context(self, hate_task, fixture_pool, biased_backend):
        cfg = ICRConfig(m=4, n=2, iterations=1, seed=7, pool_cap=None)
        result = icr_select(
            biased_backend, hate_task, fixture_pool, cfg, scoring_context="zero-shot"
        )
        # replacement candidates must equal the zero-context top-n among candidates
        init = icr_init(fixture_pool, cfg)
        candidates = [e for e in fixture_pool if e.id not in init.member_ids()]
        scored = score_pool(
            biased_backend, hate_task, candidates, empty_demonstrations(hate_task)
        )
        assert result.trace[1].added_ids == tuple(rc.example.id for rc in scored.ranked[:2])

    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        m=st.integers(2, 8),
        k=st.integers(1, 4),
    )
    def test_bookkeeping_invariants(self, seed, m, k):
        rng = random.Random(seed)
        n = rng.randint(1, m)
        size = rng.randint(max(m + n, 20), 60)
        rows = [
            (
                " ".join(rng.choices("storm calm fire river soft rage gale mist".split(), k=3)),
                rng.choice(["no", "yes"]),
            )
            for _ in range(size)
        ]
        # both labels must appear for a two-label task
        rows[0] = (rows[0][0], "no")
        rows[1] = (rows[1][0], "yes")
        pool = make_dataset(rows)
        from icr.tasks import LabelSet, TaskSpec

        task = TaskSpec(
            name="toy-hate",
            label_set=LabelSet(("no", "yes"), {"no": "no", "yes": "yes"}),
            template="Text: {text} \n Hate: {label}",
        )
        backend = SyntheticBackend(SyntheticModelParams(bias={"no": 0.4}))
        cfg = ICRConfig(m=m, n=n, iterations=k, seed=seed, pool_cap=None)
        result = icr_select(backend, task, pool, cfg)
        all_ids = {e.id for e in pool}
        previous = None
        for record in result.trace:
            members = set(record.member_ids)
            assert len(record.member_ids) == m
            assert len(members) == m
            if previous is not None:
                assert len(previous - members) <= n
                kept = [i for i in previous_order if i in members]
                kept_now = [i for i in record.member_ids if i in previous]
                assert kept == kept_now  # kept members preserve relative order
            previous = members
            previous_order = list(record.member_ids)
        assert set(result.demos.member_ids()) <= all_ids
