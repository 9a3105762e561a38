"""Training-set curation: filtration, synthesis, explanations, and the
iterative error-based selection loop.

Filtration is conservative: a prediction that cannot be parsed counts as
incorrect. Generated output is held to a rigid line grammar so that parse
failures stay measurable instead of silently degrading the training set.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .datamodel import (
    CandidatePair,
    Dataset,
    EntityRecord,
    Label,
    Provenance,
    SerializationRule,
    load_pair_file,
    serialize_entity,
    write_pair_file,
)
from .errors import (
    ConsistencyError,
    ExplanationParseError,
    GenerationParseError,
    MatchtuneError,
    ScoreRangeError,
    SelectionError,
)
from .evaluation import DecisionValue, compute_metrics, parse_decision
from .gateway import (
    Backend,
    Completion,
    FailedRequest,
    FineTuneConfig,
    FineTuneStatus,
    Usage,
    batch_complete,
    chat_complete,
    cosine,
    create_finetune_job,
    embed,
    total_usage,
    wait_for_finetune,
)
from .promptforge import (
    AttributeComparison,
    ExplanationStyle,
    FineTuneRecord,
    GenerationStrategy,
    PromptTemplate,
    RepresentationVariant,
    StructuredExplanation,
    TextualExplanation,
    render_explanation_request,
    render_finetune_record,
    render_generation_prompt,
    render_match_prompt,
    render_relevancy_prompt,
    write_finetune_file,
)

#: Separator between the two serialized descriptions when a pair is embedded.
PAIR_SEP = " [SEP] "


def pair_text(pair: CandidatePair, rule: SerializationRule) -> str:
    return serialize_entity(pair.left, rule) + PAIR_SEP + serialize_entity(pair.right, rule)


def pair_to_mapping(pair: CandidatePair) -> dict:
    return {
        "left": {"id": pair.left.id, "attributes": dict(pair.left.attributes)},
        "right": {"id": pair.right.id, "attributes": dict(pair.right.attributes)},
        "label": pair.label.value,
        "provenance": pair.provenance.value,
    }


def pair_from_mapping(data: Mapping) -> CandidatePair:
    return CandidatePair(
        left=EntityRecord(id=data["left"]["id"], attributes=data["left"]["attributes"]),
        right=EntityRecord(id=data["right"]["id"], attributes=data["right"]["attributes"]),
        label=Label(data["label"]),
        provenance=Provenance(data.get("provenance", "benchmark")),
    )


# ---------------------------------------------------------------------------
# Error-based filtration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairRef:
    dataset: str
    split: str
    index: int


@dataclass(frozen=True)
class PredictionRecord:
    """A model decision about one referenced pair, scored against gold."""

    ref: PairRef
    raw_text: str
    decision: DecisionValue
    correct: bool | None

    def __post_init__(self) -> None:
        if (self.correct is None) != (self.decision is DecisionValue.UNPARSED):
            raise ValueError("correct is defined exactly when the decision parsed")

    @classmethod
    def from_response(cls, ref: PairRef, raw_text: str, gold: Label) -> "PredictionRecord":
        decision = parse_decision(raw_text).value
        if decision is DecisionValue.UNPARSED:
            correct = None
        else:
            correct = (decision is DecisionValue.MATCH) == (gold is Label.MATCH)
        return cls(ref=ref, raw_text=raw_text, decision=decision, correct=correct)


def judge_predictions(
    dataset: Dataset,
    split: str,
    backend: Backend,
    *,
    template: PromptTemplate | None = None,
    max_in_flight: int = 8,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[PredictionRecord], Usage]:
    """Ask the judge backend to label every pair of a split."""
    pairs = dataset.split(split)
    requests = [render_match_prompt(p, dataset.serialization, template) for p in pairs]
    results = batch_complete(backend, requests, max_in_flight, sleep=sleep)
    records = []
    for i, (pair, result) in enumerate(zip(pairs, results)):
        raw = result.text if isinstance(result, Completion) else ""
        records.append(
            PredictionRecord.from_response(PairRef(dataset.name, split, i), raw, pair.label)
        )
    return records, total_usage(results)


def error_filter(trainset: Dataset, predictions: Sequence[PredictionRecord]) -> Dataset:
    """Keep only train pairs the judge labeled correctly.

    Unparsed predictions count as incorrect; all other splits pass through.
    """
    pairs = trainset.split("train")
    if len(predictions) != len(pairs):
        raise ValueError(
            f"{len(predictions)} predictions for {len(pairs)} train pairs"
        )
    kept = [pair for pair, pred in zip(pairs, predictions) if pred.correct is True]
    return trainset.with_split("train", kept)


def write_predictions(path: str | Path, predictions: Sequence[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            row = {
                "dataset": p.ref.dataset,
                "split": p.ref.split,
                "index": p.ref.index,
                "raw_text": p.raw_text,
                "decision": p.decision.value,
                "correct": p.correct,
            }
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_predictions(path: str | Path, dataset: Dataset) -> list[PredictionRecord]:
    """Reload predictions; decision and correctness are re-derived from the
    raw text against the dataset's gold labels."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            ref = PairRef(row["dataset"], row["split"], int(row["index"]))
            gold = dataset.split(ref.split)[ref.index].label
            records.append(PredictionRecord.from_response(ref, row["raw_text"], gold))
    return records


# ---------------------------------------------------------------------------
# Relevancy filtration
# ---------------------------------------------------------------------------


class Verdict(str, Enum):
    KEEP = "keep"
    DISCARD = "discard"


_VERDICT_RE = re.compile(r"\b(keep|discard|yes|no)\b", re.IGNORECASE)
_VERDICT_MAP = {"keep": Verdict.KEEP, "yes": Verdict.KEEP,
                "discard": Verdict.DISCARD, "no": Verdict.DISCARD}


def parse_relevancy_verdict(raw: str) -> tuple[Verdict, bool]:
    """First keep/discard (or yes/no) token wins; absent means discard,
    reported as unparsed."""
    m = _VERDICT_RE.search(raw)
    if m is None:
        return Verdict.DISCARD, False
    return _VERDICT_MAP[m.group(1).lower()], True


@dataclass(frozen=True)
class RelevancyJudgment:
    ref: PairRef
    verdict: Verdict
    raw_text: str

    @classmethod
    def from_response(cls, ref: PairRef, raw_text: str) -> tuple["RelevancyJudgment", bool]:
        verdict, parsed = parse_relevancy_verdict(raw_text)
        return cls(ref=ref, verdict=verdict, raw_text=raw_text), parsed


def judge_relevancy(
    dataset: Dataset,
    split: str,
    backend: Backend,
    *,
    template: PromptTemplate | None = None,
    max_in_flight: int = 8,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[RelevancyJudgment], int, Usage]:
    """Keep/discard verdicts for every pair; returns the unparsed count too."""
    pairs = dataset.split(split)
    requests = [render_relevancy_prompt(p, dataset.serialization, template) for p in pairs]
    results = batch_complete(backend, requests, max_in_flight, sleep=sleep)
    judgments = []
    unparsed = 0
    for i, result in enumerate(results):
        raw = result.text if isinstance(result, Completion) else ""
        judgment, parsed = RelevancyJudgment.from_response(PairRef(dataset.name, split, i), raw)
        judgments.append(judgment)
        if not parsed:
            unparsed += 1
    return judgments, unparsed, total_usage(results)


def relevancy_filter(trainset: Dataset, judgments: Sequence[RelevancyJudgment]) -> Dataset:
    """Keep pairs with a keep verdict, in their original order."""
    pairs = trainset.split("train")
    if len(judgments) != len(pairs):
        raise ValueError(f"{len(judgments)} judgments for {len(pairs)} train pairs")
    kept = [pair for pair, j in zip(pairs, judgments) if j.verdict is Verdict.KEEP]
    return trainset.with_split("train", kept)


def write_judgments(path: str | Path, judgments: Sequence[RelevancyJudgment]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j in judgments:
            row = {
                "dataset": j.ref.dataset,
                "split": j.ref.split,
                "index": j.ref.index,
                "raw_text": j.raw_text,
                "verdict": j.verdict.value,
            }
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_judgments(path: str | Path) -> list[RelevancyJudgment]:
    judgments = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            ref = PairRef(row["dataset"], row["split"], int(row["index"]))
            judgment, _ = RelevancyJudgment.from_response(ref, row["raw_text"])
            judgments.append(judgment)
    return judgments


# ---------------------------------------------------------------------------
# Synthetic example generation
# ---------------------------------------------------------------------------

_GENERATED_LINE_RE = re.compile(r"^(MATCH|NONMATCH)\s*\|\|\|\s*(.+?)\s*\|\|\|\s*(.+)$")

#: Requested composition of every generation response.
EXPECTED_COMPOSITION = {Label.MATCH: 1, Label.NON_MATCH: 3}


@dataclass(frozen=True)
class GeneratedBatch:
    """Pairs parsed from one generation response, with audit fields."""

    seed_ref: tuple[str, str]
    strategy: GenerationStrategy
    pairs: tuple[CandidatePair, ...]
    raw_text: str
    skipped: tuple[str, ...] = ()

    @property
    def composition_ok(self) -> bool:
        counts = {Label.MATCH: 0, Label.NON_MATCH: 0}
        for pair in self.pairs:
            counts[pair.label] += 1
        return counts == EXPECTED_COMPOSITION


def parse_generated(
    raw: str,
    seed: CandidatePair,
    rule: SerializationRule,
    strategy: GenerationStrategy = GenerationStrategy.BRIEF,
) -> GeneratedBatch:
    """Extract labeled pairs from a generation response.

    Each well-formed line reads ``MATCH|NONMATCH ||| <left> ||| <right>``.
    Malformed segments are skipped and recorded; zero parseable pairs is an
    error carrying the raw text. Generated descriptions land in the first
    serialization attribute; remaining schema attributes stay empty.
    """
    primary = rule.attributes[0]
    digest = hashlib.sha256(
        f"{seed.left.id}|{seed.right.id}|{raw}".encode("utf-8")
    ).hexdigest()[:10]
    pairs: list[CandidatePair] = []
    skipped: list[str] = []
    for line in raw.splitlines():
        line = line.strip()
        if not line or line.startswith("```"):
            continue
        m = _GENERATED_LINE_RE.match(line)
        if m is None:
            skipped.append(line)
            continue
        label = Label.MATCH if m.group(1) == "MATCH" else Label.NON_MATCH
        n = len(pairs)
        pairs.append(
            CandidatePair(
                left=EntityRecord(id=f"syn-{digest}-{n}-l", attributes={primary: m.group(2)}),
                right=EntityRecord(id=f"syn-{digest}-{n}-r", attributes={primary: m.group(3)}),
                label=label,
                provenance=Provenance.SYNTHETIC,
            )
        )
    if not pairs:
        raise GenerationParseError("generation response contained no parseable pairs", raw_text=raw)
    return GeneratedBatch(
        seed_ref=(seed.left.id, seed.right.id),
        strategy=GenerationStrategy(strategy),
        pairs=tuple(pairs),
        raw_text=raw,
        skipped=tuple(skipped),
    )


def _nearest_demonstrations(
    seed_index: int,
    pairs: Sequence[CandidatePair],
    vectors: Sequence,
    count: int,
) -> list[CandidatePair]:
    ranked = sorted(
        (j for j in range(len(pairs)) if j != seed_index),
        key=lambda j: (-cosine(vectors[seed_index], vectors[j]), j),
    )
    return [pairs[j] for j in ranked[:count]]


@dataclass(frozen=True)
class GenerationResult:
    batches: tuple[GeneratedBatch, ...]
    failures: tuple[dict, ...]
    usage: Usage

    @property
    def pairs(self) -> tuple[CandidatePair, ...]:
        return tuple(p for batch in self.batches for p in batch.pairs)


def generate_examples(
    dataset: Dataset,
    backend: Backend,
    strategy: GenerationStrategy,
    *,
    seeds: Sequence[CandidatePair] | None = None,
    template: PromptTemplate | None = None,
    max_in_flight: int = 8,
    sleep: Callable[[float], None] = time.sleep,
) -> GenerationResult:
    """Generate synthetic pairs from every seed (default: all train pairs).

    The demonstration strategy picks the six nearest train pairs to each seed
    in the embedding space of the same backend.
    """
    strategy = GenerationStrategy(strategy)
    rule = dataset.serialization
    train = dataset.split("train")
    seeds = list(seeds) if seeds is not None else list(train)
    demos_per_seed: list[Sequence[CandidatePair] | None] = [None] * len(seeds)
    if strategy is GenerationStrategy.DEMONSTRATION:
        vectors = embed(backend, [pair_text(p, rule) for p in train], sleep=sleep)
        index_of = {p.id_pair: i for i, p in enumerate(train)}
        for i, seed in enumerate(seeds):
            seed_index = index_of.get(seed.id_pair, -1)
            if seed_index < 0:
                raise ValueError("demonstration seeds must come from the train split")
            demos_per_seed[i] = _nearest_demonstrations(seed_index, train, vectors, 6)
    requests = [
        render_generation_prompt(seed, rule, strategy, demos_per_seed[i], template)
        for i, seed in enumerate(seeds)
    ]
    results = batch_complete(backend, requests, max_in_flight, sleep=sleep)
    batches = []
    failures = []
    for seed, result in zip(seeds, results):
        if isinstance(result, FailedRequest):
            failures.append({"seed": list(seed.id_pair), "error": result.error})
            continue
        try:
            batches.append(parse_generated(result.text, seed, rule, strategy))
        except GenerationParseError as exc:
            failures.append({"seed": list(seed.id_pair), "error": str(exc),
                             "raw_text": exc.raw_text})
    return GenerationResult(batches=tuple(batches), failures=tuple(failures),
                            usage=total_usage(results))


# ---------------------------------------------------------------------------
# Structured-explanation parsing
# ---------------------------------------------------------------------------

_DECISION_LINE_RE = re.compile(r"^decision:\s*(match|non-match)\s*$", re.IGNORECASE)
_SCORE_FIELD_RE = re.compile(r"^(similarity|importance)\s*=\s*([^\s|]+)$")


def _block_lines(raw: str) -> list[str]:
    lines = raw.splitlines()
    fence_indexes = [i for i, line in enumerate(lines) if line.strip().startswith("```")]
    if len(fence_indexes) >= 2:
        return lines[fence_indexes[0] + 1 : fence_indexes[1]]
    return lines


def parse_structured_explanation(raw: str) -> StructuredExplanation:
    """Parse the fenced attribute-line grammar back into an explanation.

    Scores are never clamped: values outside [0, 1] are range errors. Lines
    before the first comparison are tolerated (prompt or label echo); after
    comparisons start, any non-conforming line is a parse error.
    """
    comparisons: list[AttributeComparison] = []
    decision: Label | None = None
    for line in _block_lines(raw):
        line = line.strip()
        if not line:
            continue
        m = _DECISION_LINE_RE.match(line)
        if m is not None:
            decision = Label(m.group(1).lower())
            break
        if "|" not in line:
            if comparisons:
                raise ExplanationParseError(f"unexpected line inside explanation block: {line!r}")
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) < 3 or len(parts) > 5:
            raise ExplanationParseError(f"malformed comparison line: {line!r}")
        attribute, value_left, value_right = parts[:3]
        if not attribute:
            raise ExplanationParseError(f"comparison line lacks an attribute name: {line!r}")
        similarity: float | None = None
        importance: float | None = None
        for extra in parts[3:]:
            m = _SCORE_FIELD_RE.match(extra)
            if m is None:
                raise ExplanationParseError(f"malformed score field {extra!r} in line {line!r}")
            try:
                score = float(m.group(2))
            except ValueError:
                raise ExplanationParseError(f"non-numeric score in {extra!r}") from None
            if not 0.0 <= score <= 1.0:
                raise ScoreRangeError(f"{m.group(1)} score {score} outside [0, 1]")
            if m.group(1) == "similarity":
                similarity = score
            else:
                importance = score
        comparisons.append(
            AttributeComparison(
                attribute=attribute,
                value_left=value_left,
                value_right=value_right,
                similarity=similarity,
                importance=importance,
            )
        )
    if not comparisons:
        raise ExplanationParseError("explanation block contains no comparison lines")
    if decision is None:
        raise ExplanationParseError("explanation block is missing its decision line")
    return StructuredExplanation(comparisons=tuple(comparisons), decision=decision)


# ---------------------------------------------------------------------------
# Attaching explanations to training sets
# ---------------------------------------------------------------------------

_STYLE_VARIANTS = {
    ExplanationStyle.LONG: RepresentationVariant.TEXTUAL_LONG,
    ExplanationStyle.CONCISE_WITH_DEMOS: RepresentationVariant.TEXTUAL_CONCISE,
    ExplanationStyle.STRUCTURED: RepresentationVariant.STRUCTURED,
}


@dataclass(frozen=True)
class ExclusionEntry:
    ref: PairRef
    reason: str
    attempts: int
    raw_text: str

    def to_mapping(self) -> dict:
        return {"dataset": self.ref.dataset, "split": self.ref.split, "index": self.ref.index,
                "reason": self.reason, "attempts": self.attempts, "raw_text": self.raw_text}


@dataclass(frozen=True)
class AttachResult:
    records: tuple[FineTuneRecord, ...]
    exclusions: tuple[ExclusionEntry, ...]
    downgraded: tuple[PairRef, ...]
    explanations: tuple
    usage: Usage


def _explanation_from_response(
    raw: str, style: ExplanationStyle, pair: CandidatePair
) -> TextualExplanation | StructuredExplanation:
    if style is ExplanationStyle.STRUCTURED:
        explanation = parse_structured_explanation(raw)
        if explanation.decision is not pair.label:
            raise ConsistencyError(
                f"explanation decision {explanation.decision.value!r} contradicts "
                f"gold label {pair.label.value!r}"
            )
        return explanation
    text = raw.strip()
    if not text:
        raise ExplanationParseError("explanation response is empty")
    return TextualExplanation(
        text=text,
        style="long" if style is ExplanationStyle.LONG else "concise",
    )


def attach_explanations(
    trainset: Dataset,
    style: ExplanationStyle,
    backend: Backend,
    *,
    variant: RepresentationVariant | None = None,
    demonstrations: Sequence[tuple[CandidatePair, str]] | None = None,
    fallback: str = "exclude",
    max_retries: int = 2,
    template: PromptTemplate | None = None,
    match_template: PromptTemplate | None = None,
    system_message: str | None = None,
    max_in_flight: int = 8,
    sleep: Callable[[float], None] = time.sleep,
) -> AttachResult:
    """Generate an explanation per train pair and render the augmented records.

    Parse failures are retried up to ``max_retries`` times, then handled per
    ``fallback``: "exclude" drops the pair into the exclusion report,
    "downgrade" renders it under the standard representation instead.
    """
    style = ExplanationStyle(style)
    if fallback not in ("exclude", "downgrade"):
        raise ValueError(f"unknown fallback {fallback!r}")
    if style is ExplanationStyle.CONCISE_WITH_DEMOS and not demonstrations:
        raise ValueError("concise explanation style requires a non-empty demonstration pool")
    variant = variant or _STYLE_VARIANTS[style]
    if _STYLE_VARIANTS[style] is RepresentationVariant.STRUCTURED:
        allowed = (RepresentationVariant.STRUCTURED,
                   RepresentationVariant.STRUCTURED_NO_IMPORTANCE,
                   RepresentationVariant.STRUCTURED_NO_IMP_SIM)
    else:
        allowed = (_STYLE_VARIANTS[style],)
    if variant not in allowed:
        raise ValueError(f"variant {variant.value} incompatible with style {style.value}")

    pairs = trainset.split("train")
    rule = trainset.serialization
    requests = [
        render_explanation_request(p, rule, style, demonstrations, template) for p in pairs
    ]
    results = batch_complete(backend, requests, max_in_flight, sleep=sleep)
    usage = total_usage(results)

    records: list[FineTuneRecord] = []
    exclusions: list[ExclusionEntry] = []
    downgraded: list[PairRef] = []
    explanations: list = []
    for i, (pair, result) in enumerate(zip(pairs, results)):
        ref = PairRef(trainset.name, "train", i)
        attempts = 1
        explanation = None
        raw = ""
        reason = ""
        while True:
            if isinstance(result, FailedRequest):
                reason = result.error
            else:
                raw = result.text
                try:
                    explanation = _explanation_from_response(raw, style, pair)
                    break
                except MatchtuneError as exc:
                    reason = str(exc)
            if attempts > max_retries:
                break
            attempts += 1
            try:
                result = chat_complete(backend, requests[i], sleep=sleep)
                usage = usage + result.usage
            except MatchtuneError as exc:
                result = FailedRequest(request_index=i, error=str(exc),
                                       attempts=getattr(exc, "attempts", 1))
        if explanation is None:
            if fallback == "downgrade":
                downgraded.append(ref)
                records.append(
                    render_finetune_record(
                        pair, rule, RepresentationVariant.STANDARD,
                        dataset=trainset.name, template=match_template,
                        system_message=system_message,
                    )
                )
            else:
                exclusions.append(
                    ExclusionEntry(ref=ref, reason=reason, attempts=attempts, raw_text=raw)
                )
            continue
        explanations.append((ref, explanation))
        records.append(
            render_finetune_record(
                pair, rule, variant, explanation,
                dataset=trainset.name, template=match_template,
                system_message=system_message,
            )
        )
    return AttachResult(
        records=tuple(records),
        exclusions=tuple(exclusions),
        downgraded=tuple(downgraded),
        explanations=tuple(explanations),
        usage=usage,
    )


# ---------------------------------------------------------------------------
# Error-similarity selection
# ---------------------------------------------------------------------------


def select_by_error_similarity(
    errors: Sequence[CandidatePair],
    pool: Sequence[CandidatePair],
    backend: Backend,
    k: int,
    exclude: Sequence[CandidatePair],
    *,
    rule: SerializationRule,
    sleep: Callable[[float], None] = time.sleep,
) -> list[CandidatePair]:
    """Round-robin over errors, each taking its nearest unchosen pool pair by
    cosine similarity, until k pairs are selected.

    Pool pairs already in the exclude set (by id pair or by exact serialized
    text) are ineligible. Selected pairs come back with selected provenance.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    exclude_ids = {p.id_pair for p in exclude}
    exclude_texts = {pair_text(p, rule) for p in exclude}
    eligible = [
        p for p in pool
        if p.id_pair not in exclude_ids and pair_text(p, rule) not in exclude_texts
    ]
    if k == 0 or not errors:
        return []
    if len(eligible) < k:
        raise SelectionError(
            f"eligible pool holds {len(eligible)} pairs, need {k} "
            f"(shortfall {k - len(eligible)})"
        )
    texts = [pair_text(e, rule) for e in errors] + [pair_text(p, rule) for p in eligible]
    vectors = embed(backend, texts, sleep=sleep)
    error_vecs = vectors[: len(errors)]
    pool_vecs = vectors[len(errors):]
    rankings = [
        iter(sorted(range(len(eligible)),
                    key=lambda j, ev=ev: (-cosine(ev, pool_vecs[j]), j)))
        for ev in error_vecs
    ]
    chosen: list[int] = []
    chosen_set: set[int] = set()
    while len(chosen) < k:
        for ranking in rankings:
            if len(chosen) >= k:
                break
            for j in ranking:
                if j not in chosen_set:
                    chosen_set.add(j)
                    chosen.append(j)
                    break
    return [replace(eligible[j], provenance=Provenance.SELECTED) for j in chosen]


# ---------------------------------------------------------------------------
# Error-based selection loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionIteration:
    index: int
    error_refs: tuple[PairRef, ...]
    selected: tuple[CandidatePair, ...]
    cumulative_train_size: int
    validation_f1: float
    model_ref: str

    def to_mapping(self) -> dict:
        return {
            "index": self.index,
            "error_refs": [{"dataset": r.dataset, "split": r.split, "index": r.index}
                           for r in self.error_refs],
            "cumulative_train_size": self.cumulative_train_size,
            "validation_f1": self.validation_f1,
            "model_ref": self.model_ref,
        }


@dataclass(frozen=True)
class LoopResult:
    iterations: tuple[SelectionIteration, ...]
    best_model: str
    best_iteration: int


TrainFn = Callable[[Sequence[CandidatePair], str], str]
PredictFn = Callable[[str, Sequence[CandidatePair]], Sequence[DecisionValue]]


def _default_train_fn(
    dataset: Dataset,
    backend: Backend,
    workdir: Path,
    config: FineTuneConfig,
    sleep: Callable[[float], None],
) -> TrainFn:
    def train(pairs: Sequence[CandidatePair], tag: str) -> str:
        records = [
            render_finetune_record(p, dataset.serialization,
                                   RepresentationVariant.STANDARD, dataset=dataset.name)
            for p in pairs
        ]
        path = workdir / f"{tag}-train.jsonl"
        write_finetune_file(path, records)
        job = create_finetune_job(backend, path, config=config)
        job = wait_for_finetune(backend, job, sleep=sleep)
        if job.status is not FineTuneStatus.SUCCEEDED or not job.checkpoints:
            raise MatchtuneError(f"fine-tune for {tag} ended in status {job.status.value}")
        return job.checkpoints[-1].model_id

    return train


def _default_predict_fn(
    dataset: Dataset,
    backend: Backend,
    max_in_flight: int,
    sleep: Callable[[float], None],
) -> PredictFn:
    def predict(model_ref: str, pairs: Sequence[CandidatePair]) -> list[DecisionValue]:
        model_backend = backend.for_model(model_ref)
        requests = [render_match_prompt(p, dataset.serialization) for p in pairs]
        results = batch_complete(model_backend, requests, max_in_flight, sleep=sleep)
        return [
            parse_decision(r.text).value if isinstance(r, Completion) else DecisionValue.UNPARSED
            for r in results
        ]

    return predict


def run_error_selection_loop(
    seed_trainset: Dataset,
    pool: Sequence[CandidatePair],
    backend: Backend,
    *,
    iterations: int,
    batch_size: int,
    epochs_per_iteration: int = 5,
    workdir: str | Path,
    train_fn: TrainFn | None = None,
    predict_fn: PredictFn | None = None,
    max_in_flight: int = 8,
    sleep: Callable[[float], None] = time.sleep,
) -> LoopResult:
    """Iteratively grow the training set with pool pairs nearest to the
    current model's validation errors, retraining after each addition.

    The initial model is trained on the seed set; iteration i then selects
    ``batch_size`` pairs from the pool and retrains, so the cumulative train
    size after iteration i is seed + i * batch (unless errors ran out). Loop
    state is checkpointed per iteration under ``workdir`` and resumed when
    the same iteration directory already exists.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if batch_size < 0:
        raise ValueError("batch size must be non-negative")
    if len(pool) < iterations * batch_size:
        raise SelectionError(
            f"pool holds {len(pool)} pairs, loop needs up to {iterations * batch_size}"
        )
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    rule = seed_trainset.serialization
    config = FineTuneConfig(epochs=epochs_per_iteration)
    train = train_fn or _default_train_fn(seed_trainset, backend, workdir, config, sleep)
    predict = predict_fn or _default_predict_fn(seed_trainset, backend, max_in_flight, sleep)
    validation = seed_trainset.split("validation")
    gold = [p.label for p in validation]

    initial_path = workdir / "initial.json"
    current_train = list(seed_trainset.split("train"))
    if initial_path.exists():
        model_ref = json.loads(initial_path.read_text(encoding="utf-8"))["model_ref"]
    else:
        model_ref = train(current_train, "iter-000")
        initial_path.write_text(json.dumps({"model_ref": model_ref}), encoding="utf-8")

    records: list[SelectionIteration] = []
    for i in range(1, iterations + 1):
        iter_dir = workdir / f"iter-{i:03d}"
        state_path = iter_dir / "iteration.json"
        if state_path.exists():
            state = json.loads(state_path.read_text(encoding="utf-8"))
            selected = [pair_from_mapping(d) for d in _read_jsonl(iter_dir / "selection.jsonl")]
            record = SelectionIteration(
                index=i,
                error_refs=tuple(PairRef(r["dataset"], r["split"], r["index"])
                                 for r in state["error_refs"]),
                selected=tuple(selected),
                cumulative_train_size=state["cumulative_train_size"],
                validation_f1=state["validation_f1"],
                model_ref=state["model_ref"],
            )
            current_train.extend(selected)
            model_ref = record.model_ref
            records.append(record)
            continue

        decisions = list(predict(model_ref, validation))
        error_refs = []
        error_pairs = []
        for j, (decision, pair) in enumerate(zip(decisions, validation)):
            wrong = (
                decision is DecisionValue.UNPARSED
                or (decision is DecisionValue.MATCH) != (pair.label is Label.MATCH)
            )
            if wrong:
                error_refs.append(PairRef(seed_trainset.name, "validation", j))
                error_pairs.append(pair)
        if error_pairs and batch_size:
            selected = select_by_error_similarity(
                error_pairs, pool, backend, batch_size, current_train,
                rule=rule, sleep=sleep,
            )
        else:
            selected = []
        current_train.extend(selected)
        model_ref = train(current_train, f"iter-{i:03d}")
        f1 = compute_metrics(list(predict(model_ref, validation)), gold).f1

        iter_dir.mkdir(parents=True, exist_ok=True)
        write_pair_file(iter_dir / "train.csv", current_train, seed_trainset.schema)
        with open(iter_dir / "selection.jsonl", "w", encoding="utf-8") as fh:
            for pair in selected:
                fh.write(json.dumps(pair_to_mapping(pair), ensure_ascii=False, sort_keys=True) + "\n")
        record = SelectionIteration(
            index=i,
            error_refs=tuple(error_refs),
            selected=tuple(selected),
            cumulative_train_size=len(current_train),
            validation_f1=f1,
            model_ref=model_ref,
        )
        (iter_dir / "evaluation.json").write_text(
            json.dumps({"model_ref": model_ref, "validation_f1": f1}, sort_keys=True),
            encoding="utf-8",
        )
        state_path.write_text(json.dumps(record.to_mapping(), sort_keys=True), encoding="utf-8")
        records.append(record)

    best = max(records, key=lambda r: (r.validation_f1, -r.index))
    return LoopResult(iterations=tuple(records), best_model=best.model_ref,
                      best_iteration=best.index)


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def load_selection_train(path: str | Path, dataset: Dataset) -> list[CandidatePair]:
    """Reload a loop checkpoint's combined training file."""
    return list(load_pair_file(path, dataset.schema))
