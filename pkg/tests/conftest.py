from __future__ import annotations

import random
from pathlib import Path

import pytest

from matchtune.datamodel import (
    CandidatePair,
    Dataset,
    EntityRecord,
    Label,
    Provenance,
    SerializationRule,
)

DATA_DIR = Path(__file__).parent / "data"

TITLE_RULE = SerializationRule.single("title")


def make_pair(
    left_text: str,
    right_text: str,
    label: Label = Label.MATCH,
    idx: int = 0,
    provenance: Provenance = Provenance.BENCHMARK,
) -> CandidatePair:
    return CandidatePair(
        left=EntityRecord(id=f"l{idx}", attributes={"title": left_text}),
        right=EntityRecord(id=f"r{idx}", attributes={"title": right_text}),
        label=label,
        provenance=provenance,
    )


def make_dataset(
    train: list[CandidatePair],
    validation: list[CandidatePair] | None = None,
    test: list[CandidatePair] | None = None,
    name: str = "unit",
    domain: str = "product",
) -> Dataset:
    splits = {"train": train}
    if validation is not None:
        splits["validation"] = validation
    if test is not None:
        splits["test"] = test
    return Dataset(name=name, domain=domain, schema=("title",),
                   serialization=TITLE_RULE, splits=splits)


def sized_pairs(pos: int, neg: int, prefix: str = "p") -> list[CandidatePair]:
    """pos matches followed by neg non-matches, with unique ids and titles."""
    pairs = []
    for i in range(pos + neg):
        label = Label.MATCH if i < pos else Label.NON_MATCH
        pairs.append(
            CandidatePair(
                left=EntityRecord(id=f"{prefix}{i}l", attributes={"title": f"item {prefix}{i} alpha"}),
                right=EntityRecord(id=f"{prefix}{i}r", attributes={"title": f"item {prefix}{i} beta"}),
                label=label,
            )
        )
    return pairs


def random_title(rng: random.Random, tokens: int = 4) -> str:
    return " ".join(f"w{rng.randrange(1000)}" for _ in range(tokens))


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20250810)


@pytest.fixture
def toy_dataset():
    from matchtune.datamodel import load_dataset

    return load_dataset(DATA_DIR / "toy" / "dataset.yaml")
