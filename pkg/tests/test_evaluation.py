from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchtune.datamodel import Label
from matchtune.evaluation import (
    Decision,
    DecisionValue,
    MetricsReport,
    TransferGainRecord,
    aggregate_transfer_gain,
    build_delta_report,
    compute_metrics,
    format_delta_table,
    format_signed,
    format_transfer_table,
    parse_decision,
    round_half_away,
    select_best_checkpoint,
    transfer_gain,
)


# -- parse_decision ----------------------------------------------------------------


def test_parse_yes_sentence_is_match():
    assert parse_decision("Yes, the two offers match.").value is DecisionValue.MATCH


def test_parse_no_sentence_is_non_match():
    assert parse_decision("No. Different storage capacity.").value is DecisionValue.NON_MATCH


def test_parse_neither_token_is_unparsed():
    decision = parse_decision("These records are identical.")
    assert decision.value is DecisionValue.UNPARSED
    assert decision.span is None


def test_parse_first_occurrence_wins():
    assert parse_decision("Yes, but no warranty match").value is DecisionValue.MATCH
    assert parse_decision("no... well, yes").value is DecisionValue.NON_MATCH


def test_parse_span_records_matched_token():
    decision = parse_decision("I think Yes.")
    assert decision.span == (8, "Yes")


@pytest.mark.parametrize("text", ["yesterday it shipped", "eyes on the prize",
                                  "yes1 is a code", "the knows column", "noyes"])
def test_parse_respects_word_boundaries(text):
    assert parse_decision(text).value is DecisionValue.UNPARSED


def test_decision_span_iff_parsed():
    with pytest.raises(ValueError):
        Decision(DecisionValue.MATCH, span=None)
    with pytest.raises(ValueError):
        Decision(DecisionValue.UNPARSED, span=(0, "yes"))


# -- compute_metrics ------------------------------------------------------------------


def _values(*items: str) -> list[DecisionValue]:
    return [DecisionValue(i) for i in items]


def test_metrics_all_correct_is_perfect_f1():
    gold = [Label.MATCH] * 5 + [Label.NON_MATCH] * 5
    decisions = _values(*(["match"] * 5 + ["non-match"] * 5))
    report = compute_metrics(decisions, gold)
    assert report.f1 == 1.0
    assert (report.tp, report.fp, report.fn, report.tn) == (5, 0, 0, 5)


def test_metrics_direct_formula_arithmetic():
    gold = [Label.MATCH, Label.MATCH, Label.MATCH, Label.NON_MATCH]
    decisions = _values("match", "match", "non-match", "match")
    report = compute_metrics(decisions, gold)
    assert (report.tp, report.fp, report.fn) == (2, 1, 1)
    assert report.precision == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(2 / 3)
    assert report.f1 == pytest.approx(2 / 3)


def test_metrics_zero_predicted_positives_degenerate_zero():
    gold = [Label.MATCH, Label.NON_MATCH]
    decisions = _values("non-match", "non-match")
    report = compute_metrics(decisions, gold)
    assert report.precision == 0.0
    assert report.recall == 0.0
    assert report.f1 == 0.0


def test_metrics_unparsed_scores_as_non_match_and_is_tallied():
    gold = [Label.MATCH, Label.NON_MATCH]
    decisions = _values("unparsed", "unparsed")
    report = compute_metrics(decisions, gold)
    assert report.unparsed == 2
    assert (report.fn, report.tn) == (1, 1)
    assert report.evaluated == 2
    assert report.recall == 0.0  # the unparsed gold positive hurts recall


def test_metrics_length_mismatch_is_error():
    with pytest.raises(ValueError):
        compute_metrics(_values("match"), [Label.MATCH, Label.MATCH])


def test_metrics_rejects_unlabeled_gold():
    with pytest.raises(ValueError):
        compute_metrics(_values("match"), [Label.UNLABELED])


def test_metrics_accepts_decision_objects():
    report = compute_metrics([parse_decision("Yes")], [Label.MATCH])
    assert report.tp == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["match", "non-match", "unparsed"]),
                          st.booleans()), min_size=1, max_size=60))
def test_metrics_flipping_false_negative_never_decreases_recall_or_f1(rows):
    decisions = [DecisionValue(d) for d, _ in rows]
    gold = [Label.MATCH if g else Label.NON_MATCH for _, g in rows]
    report = compute_metrics(decisions, gold)
    for i, (decision, label) in enumerate(zip(decisions, gold)):
        if label is Label.MATCH and decision is not DecisionValue.MATCH:
            flipped = list(decisions)
            flipped[i] = DecisionValue.MATCH
            improved = compute_metrics(flipped, gold)
            assert improved.recall >= report.recall
            assert improved.f1 >= report.f1
            break


def test_f1_display_is_two_decimal_percent():
    report = MetricsReport.from_counts(tp=7, fp=2, fn=3, tn=8)
    assert report.f1_display == pytest.approx(73.68)


# -- transfer gain ----------------------------------------------------------------------


def test_transfer_gain_reproduces_reported_row():
    assert transfer_gain(53.36, 66.07, 69.19) == pytest.approx(0.803, abs=5e-4)


def test_transfer_gain_zero_numerator():
    assert transfer_gain(50.0, 50.0, 60.0) == 0.0


def test_transfer_gain_degenerate_denominator_is_flagged():
    assert transfer_gain(50.0, 55.0, 50.0) is None


def test_transfer_gain_mixed_scales_rejected():
    with pytest.raises(ValueError, match="mixed"):
        transfer_gain(0.53, 66.07, 69.19)


def test_transfer_gain_out_of_range_rejected():
    with pytest.raises(ValueError):
        transfer_gain(-1.0, 50.0, 60.0)


@settings(max_examples=80, deadline=None)
@given(st.floats(2.0, 40.0), st.floats(2.0, 40.0), st.floats(2.0, 40.0),
       st.floats(1.1, 2.2), st.floats(0.0, 10.0))
def test_transfer_gain_invariant_under_shared_affine_rescaling(f0, ft, fg, scale, offset):
    base = transfer_gain(f0, ft, fg)
    rescaled = transfer_gain(f0 * scale + offset, ft * scale + offset, fg * scale + offset)
    if base is None:
        assert rescaled is None or abs(fg - f0) * scale < 1e-6
    else:
        assert rescaled == pytest.approx(base, rel=1e-6, abs=1e-6)


def _record(target: str, f0: float, ft: float, fg: float) -> TransferGainRecord:
    return TransferGainRecord.compute(target, f0, ft, fg)


def test_aggregate_product_domain_row_ab():
    records = [
        _record("A-G", 49.16, 59.16, 50.00),
        _record("W-A", 42.04, 60.39, 65.65),
        _record("WDC", 53.36, 66.07, 69.19),
    ]
    aggregate = aggregate_transfer_gain(records, source="A-B", domain="product")
    assert aggregate.aggregate_percent == 102


def test_aggregate_product_domain_row_wdc():
    records = [
        _record("A-B", 56.57, 81.78, 87.34),
        _record("A-G", 49.16, 52.29, 50.00),
        _record("W-A", 42.04, 53.74, 65.65),
    ]
    aggregate = aggregate_transfer_gain(records, source="WDC", domain="product")
    assert aggregate.aggregate_percent in (72, 73)  # 72.51 exact; published value rounds down


def test_aggregate_scholar_domain_row_ab():
    records = [
        _record("D-A", 85.52, 79.60, 97.42),
        _record("D-S", 67.69, 42.89, 92.95),
    ]
    aggregate = aggregate_transfer_gain(records, source="A-B", domain="scholar")
    assert aggregate.aggregate_percent == -83


def test_aggregate_rejects_source_among_targets():
    with pytest.raises(ValueError):
        aggregate_transfer_gain([_record("A-B", 1.0, 2.0, 3.0)], source="A-B", domain="product")


def test_aggregate_degenerate_denominator_flagged():
    records = [_record("X", 50.0, 55.0, 50.0)]
    aggregate = aggregate_transfer_gain(records, source="S", domain="product")
    assert aggregate.aggregate_percent is None


def test_aggregate_reports_mean_gain_alongside():
    records = [
        _record("A-G", 49.16, 59.16, 50.00),
        _record("W-A", 42.04, 60.39, 65.65),
        _record("WDC", 53.36, 66.07, 69.19),
    ]
    aggregate = aggregate_transfer_gain(records, source="A-B", domain="product")
    # the per-target mean is wildly different from ratio-of-sums (A-G blows up)
    assert aggregate.mean_gain == pytest.approx(4.49, abs=0.01)


# -- checkpoint selection -----------------------------------------------------------------


def _report(f1: float) -> MetricsReport:
    return MetricsReport(tp=1, fp=0, fn=0, tn=0, unparsed=0,
                         precision=1.0, recall=1.0, f1=f1)


def test_select_best_single_checkpoint():
    assert select_best_checkpoint([("only", _report(0.5))]) == "only"


def test_select_best_is_argmax():
    evals = [("e1", _report(0.6)), ("e2", _report(0.8)), ("e3", _report(0.7))]
    assert select_best_checkpoint(evals) == "e2"


def test_select_best_tie_goes_to_earliest():
    evals = [("e1", _report(0.7)), ("e2", _report(0.7))]
    assert select_best_checkpoint(evals) == "e1"


def test_select_best_empty_is_error():
    with pytest.raises(ValueError):
        select_best_checkpoint([])


# -- delta report ------------------------------------------------------------------------


def _report_from_f1(f1_percent: float) -> MetricsReport:
    return MetricsReport(tp=0, fp=0, fn=0, tn=0, unparsed=0,
                         precision=0.0, recall=0.0, f1=f1_percent / 100.0)


def test_delta_report_positive_delta():
    cells = build_delta_report({"WDC": _report_from_f1(69.19)},
                               {"WDC": _report_from_f1(74.13)})
    assert cells[0].delta_text == "+4.94"


def test_delta_report_zero_delta():
    cells = build_delta_report({"WDC": _report_from_f1(70.0)},
                               {"WDC": _report_from_f1(70.0)})
    assert cells[0].delta_text == "+0.00"


def test_delta_report_negative_delta():
    cells = build_delta_report({"WDC": _report_from_f1(83.41)},
                               {"WDC": _report_from_f1(81.30)})
    assert cells[0].delta_text == "-2.11"


def test_delta_report_key_mismatch_is_error():
    with pytest.raises(ValueError):
        build_delta_report({"a": _report_from_f1(1)}, {"b": _report_from_f1(1)})


def test_delta_table_marks_best_and_second():
    cells = build_delta_report({"WDC": _report_from_f1(69.19)},
                               {"WDC": _report_from_f1(74.13)})
    table = format_delta_table(cells, "standard", "structured")
    assert "**74.13 (+4.94)**" in table
    assert "__69.19 (+0.00)__" in table


def test_transfer_table_lists_column_groups():
    record = _record("A-G", 49.16, 59.16, 50.00)
    aggregate = aggregate_transfer_gain([record], source="A-B", domain="product")
    text = format_transfer_table("A-B", 87.34, aggregate, None)
    assert "No Transfer: 87.34" in text
    assert "In-Domain Average Gain:" in text
    assert "Cross-Domain Average Gain: undefined" in text


# -- rounding helpers ------------------------------------------------------------------------


def test_round_half_away_from_zero():
    assert round_half_away(0.005, 2) == 0.01
    assert round_half_away(-0.005, 2) == -0.01
    assert round_half_away(72.51, 0) == 73.0
    assert round_half_away(-30.382, 0) == -30.0


def test_format_signed_normalizes_negative_zero():
    assert format_signed(-0.0001) == "+0.00"


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(["yes", "no", "Yes", "NO"]),
       st.text(alphabet=" .,;-", min_size=1, max_size=10),
       st.sampled_from(["yes", "no"]))
def test_parse_first_token_occurrence_wins(first, filler, second):
    raw = f"{first}{filler}{second}"
    expected = DecisionValue.MATCH if first.lower() == "yes" else DecisionValue.NON_MATCH
    assert parse_decision(raw).value is expected
