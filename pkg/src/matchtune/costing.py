"""Token accounting and dollar costs for zero-shot and fine-tuned scenarios.

Pricing sheets are dated config files keyed by model id, never hardcoded.
Costs are kept exact internally; rounding happens only at display time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .errors import PricingError
from .evaluation import round_half_away

TOKENS_PER_RATE_UNIT = 1_000_000


class Scenario(str, Enum):
    ZERO_SHOT = "zero-shot"
    FINE_TUNED = "fine-tuned"


@dataclass(frozen=True)
class ModelRates:
    """Dollars per million tokens. Tuned/training rates exist iff the model
    supports fine-tuning."""

    input: float
    output: float
    training: float | None = None
    tuned_input: float | None = None
    tuned_output: float | None = None

    def __post_init__(self) -> None:
        for name in ("input", "output", "training", "tuned_input", "tuned_output"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise PricingError(f"rate {name} must be non-negative, got {value}")
        tuned = (self.training, self.tuned_input, self.tuned_output)
        if any(v is not None for v in tuned) and not all(v is not None for v in tuned):
            raise PricingError(
                "training, tuned_input, and tuned_output rates must be declared together"
            )

    @property
    def supports_finetuning(self) -> bool:
        return self.training is not None


@dataclass(frozen=True)
class PricingSheet:
    rates: Mapping[str, ModelRates]
    effective_date: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "rates", dict(self.rates))

    def lookup(self, model_id: str) -> ModelRates:
        try:
            return self.rates[model_id]
        except KeyError:
            raise PricingError(f"no pricing for model {model_id!r}") from None


def load_pricing_sheet(path: str | Path) -> PricingSheet:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict) or "models" not in data:
        raise PricingError(f"{path}: pricing sheet needs an 'effective_date' and a 'models' map")
    rates = {
        str(model): ModelRates(
            input=float(spec["input"]),
            output=float(spec["output"]),
            training=None if spec.get("training") is None else float(spec["training"]),
            tuned_input=None if spec.get("tuned_input") is None else float(spec["tuned_input"]),
            tuned_output=None if spec.get("tuned_output") is None else float(spec["tuned_output"]),
        )
        for model, spec in data["models"].items()
    }
    return PricingSheet(rates=rates, effective_date=str(data.get("effective_date", "")))


@dataclass(frozen=True)
class UsageLedger:
    """Token totals for one scenario column."""

    scenario: Scenario
    input_tokens: int = 0
    output_tokens: int = 0
    training_tokens: int = 0
    training_examples: int = 0
    inference_examples: int = 0
    label: str = ""

    def __post_init__(self) -> None:
        counts = (self.input_tokens, self.output_tokens, self.training_tokens,
                  self.training_examples, self.inference_examples)
        if min(counts) < 0:
            raise PricingError("ledger counts must be non-negative")
        if self.scenario is Scenario.ZERO_SHOT and self.training_tokens:
            raise PricingError("zero-shot ledgers carry no training tokens")

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens


def training_cost(tokens: int, sheet: PricingSheet, model_id: str) -> float:
    """Exact training dollars; round only for display."""
    rates = sheet.lookup(model_id)
    if rates.training is None:
        raise PricingError(f"model {model_id!r} has no training rate")
    return tokens * rates.training / TOKENS_PER_RATE_UNIT


def inference_cost(ledger: UsageLedger, sheet: PricingSheet, model_id: str) -> float:
    """Exact inference dollars under the ledger's scenario rates."""
    rates = sheet.lookup(model_id)
    if ledger.scenario is Scenario.FINE_TUNED:
        if rates.tuned_input is None or rates.tuned_output is None:
            raise PricingError(f"model {model_id!r} has no fine-tuned inference rates")
        rate_in, rate_out = rates.tuned_input, rates.tuned_output
    else:
        rate_in, rate_out = rates.input, rates.output
    return (
        ledger.input_tokens * rate_in / TOKENS_PER_RATE_UNIT
        + ledger.output_tokens * rate_out / TOKENS_PER_RATE_UNIT
    )


def cost_per_example(training_cost_dollars: float, examples: int) -> float:
    """Training cost per example, in exact cents."""
    if examples <= 0:
        raise ValueError("cost per example requires a positive example count")
    return training_cost_dollars / examples * 100.0


def mean_token_count(ledger: UsageLedger) -> float:
    if ledger.inference_examples == 0:
        return 0.0
    return ledger.total_tokens / ledger.inference_examples


@dataclass(frozen=True)
class CostColumn:
    model_id: str
    label: str
    scenario: Scenario
    training_tokens: int
    training_examples: int
    training_cost: float
    cost_per_example_cents: float
    input_tokens: int
    output_tokens: int
    total_tokens: int
    mean_token_count: float
    inference_examples: int
    inference_cost: float

    def to_mapping(self) -> dict:
        return {
            "model": self.model_id,
            "label": self.label,
            "scenario": self.scenario.value,
            "training_tokens": self.training_tokens,
            "training_examples": self.training_examples,
            "training_cost": self.training_cost,
            "cost_per_example_cents": self.cost_per_example_cents,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "total_tokens": self.total_tokens,
            "mean_token_count": self.mean_token_count,
            "inference_examples": self.inference_examples,
            "inference_cost": self.inference_cost,
        }


@dataclass(frozen=True)
class CostReport:
    columns: tuple[CostColumn, ...]
    effective_date: str

    def to_json(self) -> str:
        payload = {
            "effective_date": self.effective_date,
            "columns": [c.to_mapping() for c in self.columns],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def build_cost_report(
    ledgers: Sequence[tuple[str, UsageLedger]],
    sheet: PricingSheet,
) -> CostReport:
    """One column per (model id, ledger); rows mirror the cost-table layout."""
    columns = []
    for model_id, ledger in ledgers:
        if ledger.training_tokens:
            train_dollars = training_cost(ledger.training_tokens, sheet, model_id)
        else:
            train_dollars = 0.0
        if ledger.training_examples > 0:
            per_example = cost_per_example(train_dollars, ledger.training_examples)
        else:
            per_example = 0.0
        columns.append(
            CostColumn(
                model_id=model_id,
                label=ledger.label or f"{model_id} {ledger.scenario.value}",
                scenario=ledger.scenario,
                training_tokens=ledger.training_tokens,
                training_examples=ledger.training_examples,
                training_cost=train_dollars,
                cost_per_example_cents=per_example,
                input_tokens=ledger.input_tokens,
                output_tokens=ledger.output_tokens,
                total_tokens=ledger.total_tokens,
                mean_token_count=mean_token_count(ledger),
                inference_examples=ledger.inference_examples,
                inference_cost=inference_cost(ledger, sheet, model_id),
            )
        )
    return CostReport(columns=tuple(columns), effective_date=sheet.effective_date)


def format_dollars(value: float) -> str:
    return f"${round_half_away(value, 2):.2f}"


def format_cents(value: float) -> str:
    return f"{round_half_away(value, 2):.2f}¢"


_ROWS = (
    ("Training tokens", lambda c: f"{c.training_tokens:,}"),
    ("Cost per example", lambda c: format_cents(c.cost_per_example_cents)),
    ("Total fine-tuning cost", lambda c: format_dollars(c.training_cost)),
    ("Total Input tokens", lambda c: f"{c.input_tokens:,}"),
    ("Total Output tokens", lambda c: f"{c.output_tokens:,}"),
    ("Mean Token Count", lambda c: f"{round_half_away(c.mean_token_count, 2):.2f}"),
    ("Total Token Count", lambda c: f"{c.total_tokens:,}"),
    ("Total Inference Cost", lambda c: format_dollars(c.inference_cost)),
)


def format_cost_table(report: CostReport) -> str:
    header = ["Metric"] + [c.label for c in report.columns]
    rows = [header]
    for name, extract in _ROWS:
        rows.append([name] + [extract(c) for c in report.columns])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    if report.effective_date:
        lines.append(f"pricing effective: {report.effective_date}")
    for i, row in enumerate(rows):
        lines.append(
            "  ".join(
                cell.ljust(w) if j == 0 else cell.rjust(w)
                for j, (cell, w) in enumerate(zip(row, widths))
            )
        )
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
