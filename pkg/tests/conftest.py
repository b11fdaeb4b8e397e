"""Shared fixtures: tiny deterministic tasks, pools, and backends."""

from __future__ import annotations

import pytest

from icr.backends import SyntheticBackend, SyntheticModelParams
from icr.tasks import Dataset, Example, LabelSet, TaskSpec


def make_examples(rows):
    return tuple(
        Example(id=i, fields={"text": text}, label=label)
        for i, (text, label) in enumerate(rows)
    )


def make_dataset(rows, role="train-pool"):
    return Dataset(examples=make_examples(rows), role=role)


@pytest.fixture
def hate_task():
    return TaskSpec(
        name="toy-hate",
        label_set=LabelSet(labels=("no", "yes"), verbalizers={"no": "no", "yes": "yes"}),
        template="Text: {text} \n Hate: {label}",
    )


@pytest.fixture
def emotion_task():
    labels = ("anger", "joy", "optimism", "sadness")
    return TaskSpec(
        name="toy-emotion",
        label_set=LabelSet(labels=labels, verbalizers={l: l for l in labels}),
        template="{text} \n What is the emotion of the text? \n {label}",
    )


@pytest.fixture
def pair_task():
    return TaskSpec(
        name="toy-pair",
        label_set=LabelSet(labels=("no", "yes"), verbalizers={"no": "no", "yes": "yes"}),
        template="Do these sentences match? \n {sentence1} \n {sentence2} \n {label}",
    )


# A fixed 20-example pool with overlapping token families on both sides, so
# misconfidence rankings are non-trivial under a biased synthetic model.
FIXTURE_POOL_20 = [
    ("calm river stone", "no"),
    ("calm river moss", "no"),
    ("quiet meadow stone", "no"),
    ("quiet meadow fern", "no"),
    ("soft dawn mist", "no"),
    ("soft dawn glow", "no"),
    ("gentle brook pebble", "no"),
    ("gentle brook ripple", "no"),
    ("slow cloud drift", "no"),
    ("slow cloud haze", "no"),
    ("mild grove shade", "no"),
    ("mild grove bloom", "no"),
    ("storm rage fire", "yes"),
    ("storm rage venom", "yes"),
    ("storm spite burn", "yes"),
    ("fury spite sting", "yes"),
    ("fury wrath gale", "yes"),
    ("wrath howl blast", "yes"),
    ("storm howl fire", "yes"),
    ("rage gale burn", "yes"),
]


@pytest.fixture
def fixture_pool():
    return make_dataset(FIXTURE_POOL_20)


@pytest.fixture
def biased_params():
    return SyntheticModelParams(bias={"no": 0.8}, alpha=4.0, temperature=1.0)


@pytest.fixture
def biased_backend(biased_params):
    return SyntheticBackend(biased_params)


# ---------------------------------------------------------------------------
# Imbalanced end-to-end fixture: the synthetic model favors "no" with zero
# context, while test queries share tokens with specific "yes" pool examples.
# Selection methods that surface confidently-misjudged "yes" candidates
# recover accuracy that uniform sampling leaves on the table.
# ---------------------------------------------------------------------------

IMBALANCED_POOL = [
    # 16 "no" examples, four token families
    ("calm soft quiet moss", "no"),
    ("calm soft quiet fern", "no"),
    ("calm soft quiet dew", "no"),
    ("calm soft quiet mist", "no"),
    ("meadow green mild clover", "no"),
    ("meadow green mild grass", "no"),
    ("meadow green mild bloom", "no"),
    ("meadow green mild seed", "no"),
    ("brook clear cool pebble", "no"),
    ("brook clear cool ripple", "no"),
    ("brook clear cool stream", "no"),
    ("brook clear cool pond", "no"),
    ("dawn pale still light", "no"),
    ("dawn pale still glow", "no"),
    ("dawn pale still haze", "no"),
    ("dawn pale still hush", "no"),
    # 8 "yes" examples, one token family each, all sharing "storm"
    ("storm umbra rage fire", "yes"),
    ("storm vexil fury burn", "yes"),
    ("storm quill spite venom", "yes"),
    ("storm zephyr scorn sting", "yes"),
    ("storm ember wrath prick", "yes"),
    ("storm raven bile barb", "yes"),
    ("storm onyx gale gust", "yes"),
    ("storm cinder howl blast", "yes"),
]

IMBALANCED_TEST = [
    # two probes per tested "yes" family (families of pool ids 16..21)
    ("storm umbra probe one", "yes"),
    ("storm umbra probe two", "yes"),
    ("storm vexil probe one", "yes"),
    ("storm vexil probe two", "yes"),
    ("storm quill probe one", "yes"),
    ("storm quill probe two", "yes"),
    ("storm zephyr probe one", "yes"),
    ("storm zephyr probe two", "yes"),
    ("storm ember probe one", "yes"),
    ("storm ember probe two", "yes"),
    ("storm raven probe one", "yes"),
    ("storm raven probe two", "yes"),
    # eight "no" probes, aligned with the "no" families
    ("calm soft probe", "no"),
    ("calm quiet probe", "no"),
    ("meadow green probe", "no"),
    ("meadow mild probe", "no"),
    ("brook clear probe", "no"),
    ("brook cool probe", "no"),
    ("dawn pale probe", "no"),
    ("dawn still probe", "no"),
]

IMBALANCED_PARAMS = dict(bias={"no": 1.2, "yes": 0.0}, alpha=4.0, temperature=1.0)


@pytest.fixture
def imbalanced_pool():
    return make_dataset(IMBALANCED_POOL)


@pytest.fixture
def imbalanced_test():
    return make_dataset(IMBALANCED_TEST, role="test")


@pytest.fixture
def imbalanced_backend():
    return SyntheticBackend(SyntheticModelParams(**IMBALANCED_PARAMS))
