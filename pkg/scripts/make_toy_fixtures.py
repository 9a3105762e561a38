#!/usr/bin/env python3
"""Regenerate the bundled toy fixtures under tests/data/.

The toy dataset is engineered around the heuristic mock's token-overlap rule:
per split it holds 6 easy matches (overlap 5/6), 1 borderline match (3/6),
3 hard matches (3/7), 8 easy non-matches (1/9), and 2 corner non-matches
(3/6). At the default 0.5 threshold the judge therefore mislabels the hard
matches and corner non-matches, giving every curation pipeline real errors
to work with, while mock fine-tuned checkpoints (lower thresholds) recover
the hard matches.
"""

from __future__ import annotations

import json
from pathlib import Path

from matchtune.datamodel import (
    CandidatePair,
    Dataset,
    EntityRecord,
    Label,
    SerializationRule,
    write_dataset,
)
from matchtune.gateway import jaccard_overlap, write_replay_fixture
from matchtune.promptforge import (
    AttributeComparison,
    ExplanationStyle,
    StructuredExplanation,
    render_explanation_request,
    render_structured_block,
)

DATA_DIR = Path(__file__).resolve().parent.parent / "tests" / "data"

RULE = SerializationRule.single("title")

# (kind, label): kind controls the token-overlap band.
SPLIT_PLAN = (
    [("easy-match", Label.MATCH)] * 6
    + [("border-match", Label.MATCH)] * 1
    + [("hard-match", Label.MATCH)] * 3
    + [("easy-non", Label.NON_MATCH)] * 8
    + [("corner-non", Label.NON_MATCH)] * 2
)

_NOUNS = ["laptop", "tablet", "camera", "router", "monitor", "printer", "speaker"]


def _titles(kind: str, uid: int) -> tuple[str, str]:
    noun = _NOUNS[uid % len(_NOUNS)]
    base = [f"brand{uid}", f"model{uid}", f"series{uid}", f"cap{uid}", f"color{uid}", f"gen{uid}"]
    if kind == "easy-match":        # overlap 5/6
        left, right = base, base[:5]
    elif kind == "border-match":    # overlap 3/6
        left, right = base, base[:3]
    elif kind == "hard-match":      # overlap 3/7
        left, right = base + [f"rev{uid}"], base[:3]
    elif kind == "corner-non":      # overlap 3/6, labeled non-match
        left, right = base, base[:3]
    elif kind == "easy-non":        # overlap 1/9
        left = base[:4] + [noun]
        right = [f"alt{uid}", f"other{uid}", f"thing{uid}", f"size{uid}", noun]
    else:
        raise ValueError(kind)
    return " ".join(left), " ".join(right)


def build_split(split: str, offset: int) -> list[CandidatePair]:
    pairs = []
    for i, (kind, label) in enumerate(SPLIT_PLAN):
        uid = offset + i
        left_title, right_title = _titles(kind, uid)
        pairs.append(
            CandidatePair(
                left=EntityRecord(id=f"{split[0]}{i}l", attributes={"title": left_title}),
                right=EntityRecord(id=f"{split[0]}{i}r", attributes={"title": right_title}),
                label=label,
            )
        )
    return pairs


def build_dataset() -> Dataset:
    return Dataset(
        name="toy-products",
        domain="product",
        schema=("title",),
        serialization=RULE,
        splits={
            "train": build_split("train", 0),
            "validation": build_split("validation", 100),
            "test": build_split("test", 200),
        },
    )


def build_explanations(dataset: Dataset, out_path: Path) -> None:
    entries = []
    for pair in dataset.split("train"):
        left = pair.left.attributes["title"]
        right = pair.right.attributes["title"]
        explanation = StructuredExplanation(
            comparisons=(
                AttributeComparison(
                    attribute="title",
                    value_left=left,
                    value_right=right,
                    similarity=round(jaccard_overlap(left, right), 2),
                    importance=0.8,
                ),
            ),
            decision=pair.label,
        )
        request = render_explanation_request(pair, RULE, ExplanationStyle.STRUCTURED)
        entries.append((request, render_structured_block(explanation), None))
    write_replay_fixture(out_path, entries)


PRICING = """\
effective_date: "2025-01"
models:
  mock-model:
    input: 0.15
    output: 0.60
    training: 3.00
    tuned_input: 0.30
    tuned_output: 1.20
"""

EXPERIMENT = """\
run_id: toy
seed: 7
datasets:
  - toy/dataset.yaml
source: toy-products
variant: structured
stages: [ingest, explain, filter, build, finetune, predict, evaluate, transfer, cost]
backends:
  judge: {kind: mock-heuristic, threshold: 0.5, model: mock-model}
  explainer: {kind: mock-replay, fixture_path: toy/explanations.jsonl, model: mock-model}
  target: {kind: mock-heuristic, threshold: 0.5, model: mock-model}
explain:
  style: structured
  backend: explainer
  fallback: exclude
filter:
  kind: error
  backend: judge
build:
  variant: structured
finetune:
  backend: target
  epochs: 3
  learning_rate_multiplier: 1.8
  batch_size: 16
  selection: best-validation-f1
predict:
  backend: target
evaluate:
  targets: [toy-products]
transfer: {}
cost:
  pricing_sheet: toy/pricing.yaml
  model: mock-model
"""

# F1 grid for the standard fine-tuned 8B model: zero-shot row, then one row
# per training set; the diagonal is the target-tuned reference. The D-A->WDC
# cell carries the delta-consistent value (see tests).
TRANSFER_MATRIX = {
    "zero_shot": {"A-B": 56.57, "A-G": 49.16, "W-A": 42.04, "WDC": 53.36,
                  "D-A": 85.52, "D-S": 67.69},
    "tuned": {
        "A-B": {"A-B": 87.34, "A-G": 59.16, "W-A": 60.39, "WDC": 66.07, "D-A": 79.60, "D-S": 42.89},
        "A-G": {"A-B": 67.48, "A-G": 50.00, "W-A": 44.73, "WDC": 39.53, "D-A": 76.28, "D-S": 60.89},
        "W-A": {"A-B": 86.24, "A-G": 60.41, "W-A": 65.65, "WDC": 57.80, "D-A": 71.71, "D-S": 51.19},
        "WDC": {"A-B": 81.78, "A-G": 52.29, "W-A": 53.74, "WDC": 69.19, "D-A": 74.52, "D-S": 67.40},
        "D-A": {"A-B": 58.02, "A-G": 49.66, "W-A": 40.82, "WDC": 38.64, "D-A": 97.42, "D-S": 79.56},
        "D-S": {"A-B": 65.71, "A-G": 46.22, "W-A": 42.35, "WDC": 52.00, "D-A": 96.70, "D-S": 92.95},
    },
    "domains": {"A-B": "product", "A-G": "product", "W-A": "product", "WDC": "product",
                "D-A": "scholar", "D-S": "scholar"},
    "expected_average_gain": {
        "A-B": {"product": 102, "scholar": -83},
        "A-G": {"product": -1, "scholar": -43},
        "W-A": {"product": 96, "scholar": -82},
        "WDC": {"product": 72, "scholar": -30},
        "D-A": {"product": -20, "scholar": 47},
        "D-S": {"product": 7, "scholar": 94},
    },
}


def main() -> None:
    toy_dir = DATA_DIR / "toy"
    toy_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset()
    write_dataset(dataset, toy_dir)
    build_explanations(dataset, toy_dir / "explanations.jsonl")
    (toy_dir / "pricing.yaml").write_text(PRICING, encoding="utf-8")
    (DATA_DIR / "experiment.yaml").write_text(EXPERIMENT, encoding="utf-8")
    (DATA_DIR / "transfer_matrix_llama8b.json").write_text(
        json.dumps(TRANSFER_MATRIX, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote fixtures under {DATA_DIR}")


if __name__ == "__main__":
    main()
