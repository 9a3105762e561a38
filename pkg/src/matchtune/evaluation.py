"""Decision parsing, matching metrics, transfer gains, and report tables."""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from enum import Enum
from typing import Mapping, Sequence

from .datamodel import Label

#: Denominators closer to zero than this make a transfer gain undefined.
DEGENERATE_EPS = 1e-9

_DECISION_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


class DecisionValue(str, Enum):
    MATCH = "match"
    NON_MATCH = "non-match"
    UNPARSED = "unparsed"


@dataclass(frozen=True)
class Decision:
    """A parsed model response; the span records the token that decided it."""

    value: DecisionValue
    span: tuple[int, str] | None = None

    def __post_init__(self) -> None:
        if (self.span is None) != (self.value is DecisionValue.UNPARSED):
            raise ValueError("span present iff the decision parsed")


def parse_decision(raw: str) -> Decision:
    """Scan for the first word-boundary 'yes' or 'no', case-insensitively.

    Neither token present yields an unparsed decision, never an error.
    """
    m = _DECISION_RE.search(raw)
    if m is None:
        return Decision(DecisionValue.UNPARSED)
    value = DecisionValue.MATCH if m.group(1).lower() == "yes" else DecisionValue.NON_MATCH
    return Decision(value, span=(m.start(1), m.group(1)))


def round_half_away(value: float, ndigits: int = 2) -> float:
    """Round half away from zero (display convention; never feeds computation)."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts plus precision/recall/F1 for the match class.

    Unparsed decisions score as predicted non-match (the conservative choice
    for the positive class), so they land in fn/tn; ``unparsed`` tallies them
    separately on top of the confusion.
    """

    tp: int
    fp: int
    fn: int
    tn: int
    unparsed: int
    precision: float
    recall: float
    f1: float

    @property
    def evaluated(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def f1_display(self) -> float:
        return round_half_away(self.f1 * 100.0, 2)

    def to_mapping(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "unparsed": self.unparsed,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "f1_display": self.f1_display,
        }

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int, unparsed: int = 0) -> "MetricsReport":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp=tp, fp=fp, fn=fn, tn=tn, unparsed=unparsed,
                   precision=precision, recall=recall, f1=f1)


def compute_metrics(
    decisions: Sequence[Decision | DecisionValue],
    gold: Sequence[Label],
) -> MetricsReport:
    """Tally the confusion of decisions against gold labels (positive = match)."""
    if len(decisions) != len(gold):
        raise ValueError(f"{len(decisions)} decisions for {len(gold)} gold labels")
    tp = fp = fn = tn = unparsed = 0
    for decision, label in zip(decisions, gold):
        value = decision.value if isinstance(decision, Decision) else DecisionValue(decision)
        if label is Label.MATCH:
            positive = True
        elif label is Label.NON_MATCH:
            positive = False
        else:
            raise ValueError("gold labels must be match or non-match")
        if value is DecisionValue.UNPARSED:
            unparsed += 1
            predicted_match = False
        else:
            predicted_match = value is DecisionValue.MATCH
        if predicted_match:
            if positive:
                tp += 1
            else:
                fp += 1
        else:
            if positive:
                fn += 1
            else:
                tn += 1
    return MetricsReport.from_counts(tp, fp, fn, tn, unparsed)


# ---------------------------------------------------------------------------
# Transfer gain
# ---------------------------------------------------------------------------


def _check_scales(*values: float) -> None:
    for v in values:
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"F1 value {v} outside [0, 100]")
    if any(v > 1.0 for v in values) and any(v <= 1.0 for v in values):
        raise ValueError("mixed F1 scales: use [0,1] or [0,100] display scale consistently")


def transfer_gain(f0: float, f_transfer: float, f_target: float) -> float | None:
    """Fraction of the target-specific fine-tuning improvement achieved by a
    source-tuned model; None when the denominator is degenerate."""
    _check_scales(f0, f_transfer, f_target)
    denominator = f_target - f0
    if abs(denominator) < DEGENERATE_EPS:
        return None
    return (f_transfer - f0) / denominator


@dataclass(frozen=True)
class TransferGainRecord:
    target: str
    f0: float
    f_transfer: float
    f_target: float
    gain: float | None

    @property
    def defined(self) -> bool:
        return self.gain is not None

    @classmethod
    def compute(cls, target: str, f0: float, f_transfer: float, f_target: float) -> "TransferGainRecord":
        return cls(target=target, f0=f0, f_transfer=f_transfer, f_target=f_target,
                   gain=transfer_gain(f0, f_transfer, f_target))

    def to_mapping(self) -> dict:
        return {
            "target": self.target,
            "f0": self.f0,
            "f_transfer": self.f_transfer,
            "f_target": self.f_target,
            "gain": self.gain,
        }


@dataclass(frozen=True)
class DomainAggregate:
    """Ratio-of-sums aggregate over all targets of one domain.

    The headline aggregate is sum(f_transfer - f0) / sum(f_target - f0)
    rendered as an integer percent; the arithmetic mean of the per-target
    gains is reported alongside but is not the headline number.
    """

    source: str
    domain: str
    targets: tuple[TransferGainRecord, ...]
    aggregate_percent: int | None
    mean_gain: float | None

    def to_mapping(self) -> dict:
        return {
            "source": self.source,
            "domain": self.domain,
            "targets": [t.to_mapping() for t in self.targets],
            "aggregate_percent": self.aggregate_percent,
            "mean_gain": self.mean_gain,
        }


def aggregate_transfer_gain(
    records: Sequence[TransferGainRecord],
    *,
    source: str,
    domain: str,
) -> DomainAggregate:
    for record in records:
        if record.target == source:
            raise ValueError(f"aggregate targets must exclude the source dataset {source!r}")
    numerator = sum(r.f_transfer - r.f0 for r in records)
    denominator = sum(r.f_target - r.f0 for r in records)
    if abs(denominator) < DEGENERATE_EPS:
        percent: int | None = None
    else:
        percent = int(round_half_away(100.0 * numerator / denominator, 0))
    defined = [r.gain for r in records if r.gain is not None]
    mean = sum(defined) / len(defined) if defined else None
    return DomainAggregate(
        source=source,
        domain=domain,
        targets=tuple(records),
        aggregate_percent=percent,
        mean_gain=mean,
    )


def select_best_checkpoint(evals: Sequence[tuple[str, MetricsReport]]) -> str:
    """Highest validation F1 wins; ties go to the earliest checkpoint."""
    if not evals:
        raise ValueError("no checkpoint evaluations given")
    best_ref, best_f1 = evals[0][0], evals[0][1].f1
    for ref, report in evals[1:]:
        if report.f1 > best_f1:
            best_ref, best_f1 = ref, report.f1
    return best_ref


# ---------------------------------------------------------------------------
# Report tables
# ---------------------------------------------------------------------------


def format_signed(delta: float) -> str:
    """Two-decimal signed delta text: +4.94, -2.11, +0.00."""
    rounded = round_half_away(delta, 2)
    if rounded == 0:
        rounded = 0.0  # normalize -0.00
    return f"{rounded:+.2f}"


@dataclass(frozen=True)
class DeltaCell:
    key: str
    baseline: float
    treatment: float
    delta_text: str


def build_delta_report(
    baseline: Mapping[str, MetricsReport],
    treatment: Mapping[str, MetricsReport],
) -> list[DeltaCell]:
    """Per test set: treatment F1 with its signed delta to the baseline."""
    if set(baseline) != set(treatment):
        raise ValueError(
            f"baseline/treatment key mismatch: {sorted(set(baseline) ^ set(treatment))}"
        )
    cells = []
    for key in baseline:
        b = baseline[key].f1_display
        t = treatment[key].f1_display
        cells.append(DeltaCell(key=key, baseline=b, treatment=t,
                               delta_text=format_signed(t - b)))
    return cells


def format_delta_table(
    cells: Sequence[DeltaCell],
    baseline_name: str = "baseline",
    treatment_name: str = "treatment",
) -> str:
    """Aligned text table; the best value per column is bolded (**x**), the
    second best underlined (__x__)."""
    keys = [c.key for c in cells]
    by_key = {c.key: c for c in cells}

    def mark(value: float, other: float, text: str) -> str:
        return f"**{text}**" if value >= other else f"__{text}__"

    rows = [["run"] + keys]
    base_row = [baseline_name]
    treat_row = [treatment_name]
    for key in keys:
        cell = by_key[key]
        base_row.append(mark(cell.baseline, cell.treatment, f"{cell.baseline:.2f} (+0.00)"))
        treat_row.append(
            mark(cell.treatment, cell.baseline, f"{cell.treatment:.2f} ({cell.delta_text})")
        )
    rows += [base_row, treat_row]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_transfer_table(
    source: str,
    no_transfer: float | None,
    in_domain: DomainAggregate | None,
    cross_domain: DomainAggregate | None,
) -> str:
    """Text report mirroring the No Transfer / In-Domain / Average Gain /
    Cross-Domain / Average Gain column structure."""

    def pct(aggregate: DomainAggregate | None) -> str:
        if aggregate is None or aggregate.aggregate_percent is None:
            return "undefined"
        return f"{aggregate.aggregate_percent}%"

    def targets(aggregate: DomainAggregate | None) -> str:
        if aggregate is None or not aggregate.targets:
            return "(none)"
        parts = []
        for r in aggregate.targets:
            delta = format_signed(r.f_transfer - r.f0)
            parts.append(f"{r.target} {r.f_transfer:.2f} ({delta})")
        return "  ".join(parts)

    lines = [
        f"source: {source}",
        f"No Transfer: {no_transfer:.2f}" if no_transfer is not None else "No Transfer: -",
        f"In-Domain Transfer: {targets(in_domain)}",
        f"In-Domain Average Gain: {pct(in_domain)}",
        f"Cross-Domain Transfer: {targets(cross_domain)}",
        f"Cross-Domain Average Gain: {pct(cross_domain)}",
    ]
    return "\n".join(lines) + "\n"
