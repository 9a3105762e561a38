from __future__ import annotations

import pytest

from matchtune.curation import (
    PairRef,
    PredictionRecord,
    RelevancyJudgment,
    Verdict,
    attach_explanations,
    error_filter,
    generate_examples,
    judge_predictions,
    judge_relevancy,
    load_judgments,
    load_predictions,
    parse_generated,
    parse_relevancy_verdict,
    parse_structured_explanation,
    relevancy_filter,
    run_error_selection_loop,
    select_by_error_similarity,
    write_judgments,
    write_predictions,
)
from matchtune.datamodel import Label, Provenance
from matchtune.errors import (
    ExplanationParseError,
    GenerationParseError,
    ScoreRangeError,
    SelectionError,
)
from matchtune.evaluation import DecisionValue
from matchtune.gateway import (
    BackendConfig,
    open_backend,
    write_replay_fixture,
)
from matchtune.promptforge import (
    AttributeComparison,
    ExplanationStyle,
    GenerationStrategy,
    RepresentationVariant,
    StructuredExplanation,
    render_explanation_request,
    render_generation_prompt,
    render_structured_block,
)

from conftest import TITLE_RULE, make_dataset, make_pair, sized_pairs

NO_SLEEP = lambda _t: None


def heuristic(threshold: float = 0.5):
    return open_backend(BackendConfig(kind="mock-heuristic", threshold=threshold))


def prediction(i: int, raw: str, gold: Label) -> PredictionRecord:
    return PredictionRecord.from_response(PairRef("unit", "train", i), raw, gold)


def correct_predictions(pairs) -> list[PredictionRecord]:
    return [
        prediction(i, "Yes" if p.label is Label.MATCH else "No", p.label)
        for i, p in enumerate(pairs)
    ]


# -- error filter --------------------------------------------------------------------


def test_error_filter_all_correct_is_identity():
    dataset = make_dataset(sized_pairs(5, 5))
    predictions = correct_predictions(dataset.split("train"))
    assert error_filter(dataset, predictions).split("train") == dataset.split("train")


def test_error_filter_drops_incorrect_and_unparsed():
    dataset = make_dataset(sized_pairs(2, 2))
    pairs = dataset.split("train")
    predictions = correct_predictions(pairs)
    predictions[1] = prediction(1, "No", pairs[1].label)        # wrong on a match
    predictions[3] = prediction(3, "cannot say", pairs[3].label)  # unparsed
    filtered = error_filter(dataset, predictions)
    assert filtered.split("train") == (pairs[0], pairs[2])


def test_error_filter_all_unparsed_empties_train():
    dataset = make_dataset(sized_pairs(3, 3))
    predictions = [prediction(i, "???", p.label) for i, p in enumerate(dataset.split("train"))]
    assert error_filter(dataset, predictions).split("train") == ()


def test_error_filter_count_mismatch_is_error():
    dataset = make_dataset(sized_pairs(2, 2))
    with pytest.raises(ValueError):
        error_filter(dataset, correct_predictions(dataset.split("train"))[:-1])


def test_error_filter_preserves_other_splits():
    dataset = make_dataset(sized_pairs(2, 2), validation=sized_pairs(1, 1, prefix="v"))
    filtered = error_filter(dataset, correct_predictions(dataset.split("train")))
    assert filtered.split("validation") == dataset.split("validation")


def test_prediction_correct_defined_iff_parsed():
    record = prediction(0, "cannot tell", Label.MATCH)
    assert record.decision is DecisionValue.UNPARSED
    assert record.correct is None
    with pytest.raises(ValueError):
        PredictionRecord(PairRef("d", "train", 0), "Yes", DecisionValue.MATCH, None)


def test_predictions_round_trip_through_jsonl(tmp_path):
    dataset = make_dataset(sized_pairs(2, 2))
    predictions, usage = judge_predictions(dataset, "train", heuristic())
    assert usage.input_tokens > 0
    path = tmp_path / "pred.jsonl"
    write_predictions(path, predictions)
    assert load_predictions(path, dataset) == predictions


# -- relevancy filter -----------------------------------------------------------------


def judgment(i: int, raw: str) -> RelevancyJudgment:
    return RelevancyJudgment.from_response(PairRef("unit", "train", i), raw)[0]


def test_relevancy_filter_all_keep_is_identity():
    dataset = make_dataset(sized_pairs(3, 3))
    judgments = [judgment(i, "keep") for i in range(6)]
    assert relevancy_filter(dataset, judgments).split("train") == dataset.split("train")


def test_relevancy_filter_all_discard_empties_train():
    dataset = make_dataset(sized_pairs(3, 3))
    judgments = [judgment(i, "discard") for i in range(6)]
    assert relevancy_filter(dataset, judgments).split("train") == ()


def test_relevancy_filter_keeps_original_order():
    dataset = make_dataset(sized_pairs(2, 2))
    pairs = dataset.split("train")
    raws = ["keep", "discard", "keep", "discard"]
    judgments = [judgment(i, raw) for i, raw in enumerate(raws)]
    assert relevancy_filter(dataset, judgments).split("train") == (pairs[0], pairs[2])


def test_relevancy_filter_count_mismatch_is_error():
    dataset = make_dataset(sized_pairs(1, 1))
    with pytest.raises(ValueError):
        relevancy_filter(dataset, [judgment(0, "keep")])


@pytest.mark.parametrize("raw,verdict,parsed", [
    ("Keep this one.", Verdict.KEEP, True),
    ("I would DISCARD it", Verdict.DISCARD, True),
    ("yes", Verdict.KEEP, True),
    ("No, boring", Verdict.DISCARD, True),
    ("discard, although keep came later... keep", Verdict.DISCARD, True),
    ("mumble", Verdict.DISCARD, False),
])
def test_parse_relevancy_verdict(raw, verdict, parsed):
    assert parse_relevancy_verdict(raw) == (verdict, parsed)


def test_judge_relevancy_counts_unparsed(tmp_path):
    dataset = make_dataset(sized_pairs(1, 1))
    judgments, unparsed, _usage = judge_relevancy(dataset, "train", heuristic())
    assert len(judgments) == 2
    assert unparsed == 0  # heuristic answers yes/no, both parseable
    path = tmp_path / "j.jsonl"
    write_judgments(path, judgments)
    assert load_judgments(path) == judgments


# -- generated-output parsing -------------------------------------------------------------


def test_parse_generated_well_formed_batch():
    seed = make_pair("seed left", "seed right")
    raw = (
        "MATCH ||| alpha one ||| alpha uno\n"
        "NONMATCH ||| alpha one ||| beta two\n"
        "NONMATCH ||| gamma three ||| delta four\n"
        "NONMATCH ||| epsilon five ||| zeta six\n"
    )
    batch = parse_generated(raw, seed, TITLE_RULE)
    assert len(batch.pairs) == 4
    labels = [p.label for p in batch.pairs]
    assert labels.count(Label.MATCH) == 1
    assert labels.count(Label.NON_MATCH) == 3
    assert batch.composition_ok
    assert all(p.provenance is Provenance.SYNTHETIC for p in batch.pairs)
    assert batch.pairs[0].left.attributes["title"] == "alpha one"


def test_parse_generated_skips_malformed_segment():
    seed = make_pair("s", "s")
    raw = (
        "MATCH ||| a ||| b\n"
        "NONMATCH | broken line\n"
        "NONMATCH ||| c ||| d\n"
        "NONMATCH ||| e ||| f\n"
    )
    batch = parse_generated(raw, seed, TITLE_RULE)
    assert len(batch.pairs) == 3
    assert batch.skipped == ("NONMATCH | broken line",)
    assert not batch.composition_ok


def test_parse_generated_empty_string_is_error():
    with pytest.raises(GenerationParseError):
        parse_generated("", make_pair("s", "s"), TITLE_RULE)


def test_parse_generated_ids_are_unique_and_deterministic():
    seed = make_pair("s", "s")
    raw = "MATCH ||| a ||| b\nNONMATCH ||| c ||| d\n"
    first = parse_generated(raw, seed, TITLE_RULE)
    second = parse_generated(raw, seed, TITLE_RULE)
    assert [p.id_pair for p in first.pairs] == [p.id_pair for p in second.pairs]
    ids = [i for p in first.pairs for i in p.id_pair]
    assert len(set(ids)) == len(ids)


def test_generate_examples_via_replay(tmp_path):
    dataset = make_dataset(sized_pairs(2, 0))
    raw = (
        "MATCH ||| a1 ||| a2\n"
        "NONMATCH ||| b1 ||| b2\n"
        "NONMATCH ||| c1 ||| c2\n"
        "NONMATCH ||| d1 ||| d2\n"
    )
    entries = []
    for seed in dataset.split("train"):
        request = render_generation_prompt(seed, TITLE_RULE, GenerationStrategy.BRIEF)
        entries.append((request, raw, None))
    write_replay_fixture(tmp_path / "gen.jsonl", entries)
    backend = open_backend(BackendConfig(kind="mock-replay",
                                         fixture_path=str(tmp_path / "gen.jsonl")))
    result = generate_examples(dataset, backend, GenerationStrategy.BRIEF, sleep=NO_SLEEP)
    assert len(result.batches) == 2
    assert len(result.pairs) == 8
    assert not result.failures


# -- structured-explanation parsing ----------------------------------------------------------


def sample_explanation(decision=Label.MATCH, n: int = 2) -> StructuredExplanation:
    comparisons = tuple(
        AttributeComparison(f"attr{i}", f"left value {i}", f"right value {i}",
                            similarity=round(0.1 * i + 0.05, 2),
                            importance=round(1.0 - 0.1 * i, 2))
        for i in range(n)
    )
    return StructuredExplanation(comparisons=comparisons, decision=decision)


def test_structured_round_trip():
    explanation = sample_explanation()
    assert parse_structured_explanation(render_structured_block(explanation)) == explanation


def test_structured_round_trip_tolerates_leading_decision_text():
    explanation = sample_explanation()
    raw = "Yes\n" + render_structured_block(explanation)
    assert parse_structured_explanation(raw) == explanation


def test_structured_parse_three_attribute_lines():
    parsed = parse_structured_explanation(render_structured_block(sample_explanation(n=3)))
    assert len(parsed.comparisons) == 3


def test_structured_out_of_range_score_is_range_error():
    raw = "a | l | r | similarity=1.50 | importance=0.5\ndecision: match"
    with pytest.raises(ScoreRangeError):
        parse_structured_explanation(raw)


def test_structured_missing_decision_is_parse_error():
    raw = "a | l | r | similarity=0.50 | importance=0.5"
    with pytest.raises(ExplanationParseError, match="decision"):
        parse_structured_explanation(raw)


def test_structured_parse_handles_score_ablation():
    raw = "a | l | r | similarity=0.25\ndecision: non-match"
    parsed = parse_structured_explanation(raw)
    assert parsed.comparisons[0].similarity == 0.25
    assert parsed.comparisons[0].importance is None


def test_structured_junk_after_comparisons_is_parse_error():
    raw = "a | l | r | similarity=0.25 | importance=0.5\nrandom prose\ndecision: match"
    with pytest.raises(ExplanationParseError):
        parse_structured_explanation(raw)


def test_structured_non_numeric_score_is_parse_error():
    raw = "a | l | r | similarity=high\ndecision: match"
    with pytest.raises(ExplanationParseError):
        parse_structured_explanation(raw)


# -- attach_explanations ---------------------------------------------------------------------


def make_structured_fixture(tmp_path, dataset, bad_indexes=(), retries=2):
    """Replay fixture with parseable blocks, or garbage for bad indexes."""
    entries = []
    for i, pair in enumerate(dataset.split("train")):
        request = render_explanation_request(pair, TITLE_RULE, ExplanationStyle.STRUCTURED)
        if i in bad_indexes:
            for _ in range(retries + 1):
                entries.append((request, "unusable response", None))
        else:
            explanation = StructuredExplanation(
                comparisons=(AttributeComparison(
                    "title",
                    pair.left.attributes["title"],
                    pair.right.attributes["title"],
                    similarity=0.5, importance=0.9),),
                decision=pair.label,
            )
            entries.append((request, render_structured_block(explanation), None))
    path = tmp_path / "explain.jsonl"
    write_replay_fixture(path, entries)
    return open_backend(BackendConfig(kind="mock-replay", fixture_path=str(path)))


def test_attach_structured_explanations_over_ten_pairs(tmp_path):
    dataset = make_dataset(sized_pairs(5, 5))
    backend = make_structured_fixture(tmp_path, dataset)
    result = attach_explanations(dataset, ExplanationStyle.STRUCTURED, backend, sleep=NO_SLEEP)
    assert len(result.records) == 10
    assert not result.exclusions
    assert all(r.meta.variant is RepresentationVariant.STRUCTURED for r in result.records)


def test_attach_excludes_unparseable_after_retries(tmp_path):
    dataset = make_dataset(sized_pairs(5, 5))
    backend = make_structured_fixture(tmp_path, dataset, bad_indexes={3})
    result = attach_explanations(dataset, ExplanationStyle.STRUCTURED, backend, sleep=NO_SLEEP)
    assert len(result.records) == 9
    assert len(result.exclusions) == 1
    entry = result.exclusions[0]
    assert entry.ref.index == 3
    assert entry.attempts == 3  # initial try plus two regenerations
    assert entry.raw_text == "unusable response"


def test_attach_downgrade_fallback_renders_standard(tmp_path):
    dataset = make_dataset(sized_pairs(5, 5))
    backend = make_structured_fixture(tmp_path, dataset, bad_indexes={0})
    result = attach_explanations(dataset, ExplanationStyle.STRUCTURED, backend,
                                 fallback="downgrade", sleep=NO_SLEEP)
    assert len(result.records) == 10
    assert result.records[0].meta.variant is RepresentationVariant.STANDARD
    assert result.downgraded == (PairRef("unit", "train", 0),)


def test_attach_retry_can_recover_on_second_response(tmp_path):
    dataset = make_dataset(sized_pairs(1, 0))
    pair = dataset.split("train")[0]
    request = render_explanation_request(pair, TITLE_RULE, ExplanationStyle.STRUCTURED)
    good = render_structured_block(StructuredExplanation(
        comparisons=(AttributeComparison("title", "l", "r", 0.4, 0.6),),
        decision=pair.label,
    ))
    path = tmp_path / "explain.jsonl"
    write_replay_fixture(path, [(request, "garbage", None), (request, good, None)])
    backend = open_backend(BackendConfig(kind="mock-replay", fixture_path=str(path)))
    result = attach_explanations(dataset, ExplanationStyle.STRUCTURED, backend, sleep=NO_SLEEP)
    assert len(result.records) == 1
    assert not result.exclusions


def test_attach_rejects_contradicting_decision(tmp_path):
    dataset = make_dataset(sized_pairs(1, 0))
    pair = dataset.split("train")[0]
    request = render_explanation_request(pair, TITLE_RULE, ExplanationStyle.STRUCTURED)
    wrong = render_structured_block(StructuredExplanation(
        comparisons=(AttributeComparison("title", "l", "r", 0.4, 0.6),),
        decision=Label.NON_MATCH,  # pair is a match
    ))
    path = tmp_path / "explain.jsonl"
    write_replay_fixture(path, [(request, wrong, None)] * 3)
    backend = open_backend(BackendConfig(kind="mock-replay", fixture_path=str(path)))
    result = attach_explanations(dataset, ExplanationStyle.STRUCTURED, backend, sleep=NO_SLEEP)
    assert not result.records
    assert "contradicts" in result.exclusions[0].reason


def test_attach_never_contradicts_gold_label(tmp_path):
    dataset = make_dataset(sized_pairs(3, 3))
    backend = make_structured_fixture(tmp_path, dataset)
    result = attach_explanations(dataset, ExplanationStyle.STRUCTURED, backend, sleep=NO_SLEEP)
    for record, pair in zip(result.records, dataset.split("train")):
        assert record.label is pair.label


def test_attach_concise_requires_demonstrations():
    dataset = make_dataset(sized_pairs(1, 1))
    with pytest.raises(ValueError):
        attach_explanations(dataset, ExplanationStyle.CONCISE_WITH_DEMOS, heuristic())


def test_attach_textual_long_uses_raw_response_text(tmp_path):
    dataset = make_dataset(sized_pairs(1, 0))
    pair = dataset.split("train")[0]
    request = render_explanation_request(pair, TITLE_RULE, ExplanationStyle.LONG)
    path = tmp_path / "explain.jsonl"
    write_replay_fixture(path, [(request, "Both titles list the same item.", None)])
    backend = open_backend(BackendConfig(kind="mock-replay", fixture_path=str(path)))
    result = attach_explanations(dataset, ExplanationStyle.LONG, backend, sleep=NO_SLEEP)
    assert result.records[0].meta.variant is RepresentationVariant.TEXTUAL_LONG
    assert "same item" in result.records[0].messages[-1].content


# -- select_by_error_similarity -----------------------------------------------------------------


def test_select_k_zero_is_empty():
    errors = [make_pair("e", "e", idx=100)]
    pool = [make_pair("p", "p", idx=i) for i in range(3)]
    assert select_by_error_similarity(errors, pool, heuristic(), 0, [],
                                      rule=TITLE_RULE) == []


def test_select_no_errors_is_empty():
    pool = [make_pair("p", "p", idx=i) for i in range(3)]
    assert select_by_error_similarity([], pool, heuristic(), 2, [],
                                      rule=TITLE_RULE) == []


def test_select_nearest_neighbors_round_robin():
    # each error is textually identical to exactly one pool pair (cosine 1.0)
    error_a = make_pair("red apple fruit", "red apple", idx=900)
    error_b = make_pair("blue boat vessel", "blue boat", idx=901)
    pool = [
        make_pair("yellow sun star", "yellow sun", idx=0),
        make_pair("blue boat vessel", "blue boat", idx=1),
        make_pair("green tree plant", "green tree", idx=2),
        make_pair("red apple fruit", "red apple", idx=3),
    ]
    selected = select_by_error_similarity([error_a, error_b], pool, heuristic(), 2, [],
                                          rule=TITLE_RULE)
    assert [p.id_pair for p in selected] == [("l3", "r3"), ("l1", "r1")]
    assert all(p.provenance is Provenance.SELECTED for p in selected)


def test_select_pool_fully_excluded_is_selection_error():
    pool = [make_pair("p", "p", idx=i) for i in range(3)]
    errors = [make_pair("e", "e", idx=9)]
    with pytest.raises(SelectionError, match="shortfall"):
        select_by_error_similarity(errors, pool, heuristic(), 2, pool, rule=TITLE_RULE)


def test_select_excludes_by_serialized_text_match():
    pool = [make_pair("same text", "same text", idx=1)]
    exclude = [make_pair("same text", "same text", idx=2)]  # different ids, same text
    errors = [make_pair("e", "e", idx=9)]
    with pytest.raises(SelectionError):
        select_by_error_similarity(errors, pool, heuristic(), 1, exclude, rule=TITLE_RULE)


# -- error-based selection loop -------------------------------------------------------------------


def scripted_fns(f1_by_iteration, errors_per_round=2):
    """train_fn counts calls; predict_fn errs on the first n validation pairs
    before the model of iteration i, then scores f1_by_iteration[i]."""
    calls = {"train": 0}

    def train_fn(pairs, tag):
        calls["train"] += 1
        return f"model-{tag}"

    def predict_fn(model_ref, pairs):
        decisions = []
        for i, pair in enumerate(pairs):
            truth = DecisionValue.MATCH if pair.label is Label.MATCH else DecisionValue.NON_MATCH
            wrong = (DecisionValue.NON_MATCH if truth is DecisionValue.MATCH
                     else DecisionValue.MATCH)
            decisions.append(wrong if i < errors_per_round else truth)
        return decisions

    return train_fn, predict_fn, calls


def test_loop_cumulative_sizes_follow_seed_plus_i_times_batch(tmp_path):
    seed = make_dataset(sized_pairs(50, 50, prefix="s"),
                        validation=sized_pairs(5, 5, prefix="v"))
    pool = sized_pairs(300, 300, prefix="pool")
    train_fn, predict_fn, _ = scripted_fns({}, errors_per_round=2)
    result = run_error_selection_loop(
        seed, pool, heuristic(), iterations=5, batch_size=100,
        workdir=tmp_path / "loop", train_fn=train_fn, predict_fn=predict_fn,
    )
    sizes = [it.cumulative_train_size for it in result.iterations]
    assert sizes == [100 + i * 100 for i in range(1, 6)]
    # the recorded arithmetic matches the full-scale parameters too
    assert [2500 + i * 2500 for i in range(1, 6)] == [5000, 7500, 10000, 12500, 15000]


def test_loop_monotonically_improving_f1_selects_last_iteration(tmp_path):
    seed = make_dataset(sized_pairs(4, 4, prefix="s"),
                        validation=sized_pairs(10, 10, prefix="v"))
    pool = sized_pairs(40, 40, prefix="pool")
    calls = {"train": 0}

    def train_fn(pairs, tag):
        calls["train"] += 1
        return f"model-{tag}"

    errors_for_model = {"model-iter-000": 6, "model-iter-001": 5, "model-iter-002": 4,
                        "model-iter-003": 3, "model-iter-004": 2, "model-iter-005": 1}

    def predict_fn(model_ref, pairs):
        wrong_count = errors_for_model[model_ref]
        decisions = []
        for i, pair in enumerate(pairs):
            truth = DecisionValue.MATCH if pair.label is Label.MATCH else DecisionValue.NON_MATCH
            wrong = (DecisionValue.NON_MATCH if truth is DecisionValue.MATCH
                     else DecisionValue.MATCH)
            decisions.append(wrong if i < wrong_count else truth)
        return decisions

    result = run_error_selection_loop(
        seed, pool, heuristic(), iterations=5, batch_size=4,
        workdir=tmp_path / "loop", train_fn=train_fn, predict_fn=predict_fn,
    )
    f1s = [it.validation_f1 for it in result.iterations]
    assert f1s == sorted(f1s)
    assert result.best_iteration == 5
    assert result.best_model == "model-iter-005"


def test_loop_perfect_predictions_record_empty_selection(tmp_path):
    seed = make_dataset(sized_pairs(3, 3, prefix="s"),
                        validation=sized_pairs(2, 2, prefix="v"))
    pool = sized_pairs(10, 10, prefix="pool")
    train_fn, predict_fn, _ = scripted_fns({}, errors_per_round=0)
    result = run_error_selection_loop(
        seed, pool, heuristic(), iterations=1, batch_size=5,
        workdir=tmp_path / "loop", train_fn=train_fn, predict_fn=predict_fn,
    )
    iteration = result.iterations[0]
    assert iteration.error_refs == ()
    assert iteration.selected == ()
    assert iteration.cumulative_train_size == 6
    assert iteration.validation_f1 == 1.0


def test_loop_resumes_from_checkpoints_without_retraining(tmp_path):
    seed = make_dataset(sized_pairs(3, 3, prefix="s"),
                        validation=sized_pairs(2, 2, prefix="v"))
    pool = sized_pairs(20, 20, prefix="pool")
    train_fn, predict_fn, calls = scripted_fns({}, errors_per_round=1)
    first = run_error_selection_loop(
        seed, pool, heuristic(), iterations=2, batch_size=3,
        workdir=tmp_path / "loop", train_fn=train_fn, predict_fn=predict_fn,
    )
    trained = calls["train"]
    assert trained == 3  # initial model + 2 iterations
    second = run_error_selection_loop(
        seed, pool, heuristic(), iterations=2, batch_size=3,
        workdir=tmp_path / "loop", train_fn=train_fn, predict_fn=predict_fn,
    )
    assert calls["train"] == trained  # nothing retrained
    assert [it.to_mapping() for it in second.iterations] == [
        it.to_mapping() for it in first.iterations
    ]
    assert second.best_model == first.best_model


def test_loop_requires_big_enough_pool(tmp_path):
    seed = make_dataset(sized_pairs(2, 2), validation=sized_pairs(1, 1, prefix="v"))
    with pytest.raises(SelectionError):
        run_error_selection_loop(seed, sized_pairs(2, 2, prefix="p"), heuristic(),
                                 iterations=3, batch_size=5, workdir=tmp_path / "loop")


def test_loop_selected_pairs_are_disjoint_from_train(tmp_path):
    seed = make_dataset(sized_pairs(3, 3, prefix="s"),
                        validation=sized_pairs(3, 3, prefix="v"))
    pool = sized_pairs(15, 15, prefix="pool")
    train_fn, predict_fn, _ = scripted_fns({}, errors_per_round=2)
    result = run_error_selection_loop(
        seed, pool, heuristic(), iterations=3, batch_size=4,
        workdir=tmp_path / "loop", train_fn=train_fn, predict_fn=predict_fn,
    )
    seen = {p.id_pair for p in seed.split("train")}
    for iteration in result.iterations:
        for pair in iteration.selected:
            assert pair.id_pair not in seen
            seen.add(pair.id_pair)


# -- filtration invariants (randomized) ---------------------------------------------------------


def test_filter_outputs_are_ordered_label_preserving_subsets(rng):
    for _ in range(30):
        n_pos, n_neg = rng.randrange(0, 12), rng.randrange(0, 12)
        dataset = make_dataset(sized_pairs(n_pos, n_neg))
        pairs = dataset.split("train")
        predictions = [
            prediction(i, rng.choice(["Yes", "No", "??"]), p.label)
            for i, p in enumerate(pairs)
        ]
        filtered = error_filter(dataset, predictions)
        out = filtered.split("train")
        assert set(p.id_pair for p in out) <= set(p.id_pair for p in pairs)
        indexes = [pairs.index(p) for p in out]
        assert indexes == sorted(indexes)
        assert len(out) == sum(1 for p in predictions if p.correct is True)
