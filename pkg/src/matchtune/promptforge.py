"""Prompt and training-record rendering.

Covers every text the pipelines put in front of a model: matching prompts,
the six fine-tune example representations, explanation requests, synthetic
example generation prompts, and relevancy judgments. All rendering is pure:
identical inputs produce byte-identical output.

Default template wordings are canonical stand-ins, overridable through a
template manifest (a YAML map from template name to a plain-text file).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .datamodel import CandidatePair, Label, SerializationRule, serialize_entity
from .errors import ConsistencyError, SchemaError, TemplateError


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if self.role in (Role.USER, Role.ASSISTANT) and not self.content:
            raise SchemaError(f"{self.role.value} message content must be non-empty")


def user(content: str) -> ChatMessage:
    return ChatMessage(Role.USER, content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage(Role.ASSISTANT, content)


class RepresentationVariant(str, Enum):
    """The six training-example representations."""

    STANDARD = "standard"
    TEXTUAL_LONG = "textual-long"
    TEXTUAL_CONCISE = "textual-concise"
    STRUCTURED = "structured"
    STRUCTURED_NO_IMPORTANCE = "structured-no-importance"
    STRUCTURED_NO_IMP_SIM = "structured-no-imp-sim"


EXPLANATION_VARIANTS = (
    RepresentationVariant.TEXTUAL_LONG,
    RepresentationVariant.TEXTUAL_CONCISE,
    RepresentationVariant.STRUCTURED,
    RepresentationVariant.STRUCTURED_NO_IMPORTANCE,
    RepresentationVariant.STRUCTURED_NO_IMP_SIM,
)

STRUCTURED_VARIANTS = (
    RepresentationVariant.STRUCTURED,
    RepresentationVariant.STRUCTURED_NO_IMPORTANCE,
    RepresentationVariant.STRUCTURED_NO_IMP_SIM,
)


class ExplanationStyle(str, Enum):
    LONG = "long"
    CONCISE_WITH_DEMOS = "concise-with-demos"
    STRUCTURED = "structured"


class GenerationStrategy(str, Enum):
    BRIEF = "brief"
    DETAILED = "detailed"
    DEMONSTRATION = "demonstration"


#: Number of demonstration pairs the demonstration generation strategy embeds.
DEMONSTRATION_COUNT = 6


@dataclass(frozen=True)
class AttributeComparison:
    """One attribute-level comparison line of a structured explanation."""

    attribute: str
    value_left: str
    value_right: str
    similarity: float | None = None
    importance: float | None = None

    def __post_init__(self) -> None:
        if not self.attribute:
            raise SchemaError("comparison attribute name must be non-empty")
        for name, score in (("similarity", self.similarity), ("importance", self.importance)):
            if score is not None and not 0.0 <= score <= 1.0:
                raise SchemaError(f"{name} score {score} outside [0, 1]")


@dataclass(frozen=True)
class StructuredExplanation:
    """Attribute-level comparisons plus a match/non-match decision."""

    comparisons: tuple[AttributeComparison, ...]
    decision: Label

    def __post_init__(self) -> None:
        object.__setattr__(self, "comparisons", tuple(self.comparisons))
        if not self.comparisons:
            raise SchemaError("structured explanation needs at least one comparison")
        if self.decision not in (Label.MATCH, Label.NON_MATCH):
            raise SchemaError("structured explanation decision must be match or non-match")


@dataclass(frozen=True)
class TextualExplanation:
    text: str
    style: str = "long"  # "long" | "concise"

    def __post_init__(self) -> None:
        if not self.text:
            raise SchemaError("textual explanation text must be non-empty")


@dataclass(frozen=True)
class RecordMeta:
    left_id: str
    right_id: str
    variant: RepresentationVariant
    dataset: str = ""


@dataclass(frozen=True)
class FineTuneRecord:
    """A chat-format training example; the completion always starts with Yes/No."""

    messages: tuple[ChatMessage, ...]
    meta: RecordMeta

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        validate_conversation(self.messages)
        final = self.messages[-1]
        if final.role is not Role.ASSISTANT:
            raise SchemaError("fine-tune record must end in an assistant message")
        if not (final.content.startswith("Yes") or final.content.startswith("No")):
            raise SchemaError("assistant completion must begin with 'Yes' or 'No'")

    @property
    def label(self) -> Label:
        return Label.MATCH if self.messages[-1].content.startswith("Yes") else Label.NON_MATCH

    def to_chat_mapping(self) -> dict:
        return {"messages": [{"role": m.role.value, "content": m.content} for m in self.messages]}


def validate_conversation(messages: Sequence[ChatMessage]) -> None:
    """Optional leading system message, then strict user/assistant alternation."""
    if not messages:
        raise SchemaError("conversation must contain at least one message")
    body = list(messages)
    if body[0].role is Role.SYSTEM:
        body = body[1:]
    if not body:
        raise SchemaError("conversation needs a user message after the system message")
    for i, message in enumerate(body):
        expected = Role.USER if i % 2 == 0 else Role.ASSISTANT
        if message.role is not expected:
            raise SchemaError(
                f"conversation role sequence broken at position {i}: "
                f"expected {expected.value}, got {message.role.value}"
            )


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

ALLOWED_PLACEHOLDERS = {"entity_left", "entity_right", "demonstrations", "seed_pair", "label"}


@dataclass(frozen=True)
class PromptTemplate:
    """A named template body with a fixed placeholder vocabulary."""

    name: str
    body: str

    def __post_init__(self) -> None:
        if not self.body:
            raise TemplateError(f"template {self.name!r}: body must be non-empty")
        for name in self.placeholders():
            if name not in ALLOWED_PLACEHOLDERS:
                raise TemplateError(f"template {self.name!r}: unknown placeholder {{{name}}}")

    def placeholders(self) -> set[str]:
        found = set()
        try:
            for _, fname, _, _ in string.Formatter().parse(self.body):
                if fname:
                    found.add(fname)
        except ValueError as exc:
            raise TemplateError(f"template {self.name!r}: {exc}") from None
        return found

    def render(self, **values: str) -> str:
        try:
            return self.body.format(**values)
        except KeyError as exc:
            raise TemplateError(
                f"template {self.name!r}: unresolved placeholder {{{exc.args[0]}}}"
            ) from None

    def require(self, *names: str) -> None:
        present = self.placeholders()
        for name in names:
            if name not in present:
                raise TemplateError(f"template {self.name!r}: missing placeholder {{{name}}}")


DEFAULT_MATCH_TEMPLATE = PromptTemplate(
    name="match",
    body=(
        "Do the two entity descriptions refer to the same real-world entity? "
        "Answer with 'Yes' if they do and 'No' if they do not.\n"
        "Entity 1: '{entity_left}'\n"
        "Entity 2: '{entity_right}'"
    ),
)

_STRUCTURED_FORMAT_INSTRUCTION = (
    "Compare the two descriptions attribute by attribute. For every attribute, "
    "state its importance for the decision, as well as the similarity of the "
    "attribute values. Respond with a fenced code block containing one line per "
    "attribute in exactly this form:\n"
    "<attribute> | <value left> | <value right> | similarity=<0.00-1.00> | importance=<0.00-1.00>\n"
    "and finish the block with a final line 'decision: match' or 'decision: non-match'."
)

DEFAULT_EXPLAIN_LONG_TEMPLATE = PromptTemplate(
    name="explain-long",
    body=(
        "Do the two entity descriptions refer to the same real-world entity? "
        "Answer with 'Yes' if they do and 'No' if they do not.\n"
        "Entity 1: '{entity_left}'\n"
        "Entity 2: '{entity_right}'\n"
        "The correct answer is: {label}\n"
        "Explain why this is the correct answer."
    ),
)

DEFAULT_EXPLAIN_CONCISE_TEMPLATE = PromptTemplate(
    name="explain-concise",
    body=(
        "Here are entity pairs with concise explanations of their labels:\n"
        "{demonstrations}\n"
        "Now write a similarly concise explanation for the following pair.\n"
        "Entity 1: '{entity_left}'\n"
        "Entity 2: '{entity_right}'\n"
        "The correct answer is: {label}\n"
        "Explanation:"
    ),
)

DEFAULT_EXPLAIN_STRUCTURED_TEMPLATE = PromptTemplate(
    name="explain-structured",
    body=(
        "Entity 1: '{entity_left}'\n"
        "Entity 2: '{entity_right}'\n"
        "The correct answer is: {label}\n" + _STRUCTURED_FORMAT_INSTRUCTION
    ),
)

_GENERATION_OUTPUT_GRAMMAR = (
    "Output exactly one pair per line, in this form and nothing else:\n"
    "MATCH ||| <left entity description> ||| <right entity description>\n"
    "NONMATCH ||| <left entity description> ||| <right entity description>"
)

DEFAULT_GENERATE_BRIEF_TEMPLATE = PromptTemplate(
    name="generate-brief",
    body=(
        "Generate three non-matches and one match derived from the seed entity "
        "pair below.\n"
        "Seed pair:\n{seed_pair}\n" + _GENERATION_OUTPUT_GRAMMAR
    ),
)

_DETAILED_BACKGROUND = (
    "Entity matching decides whether two entity descriptions refer to the same "
    "real-world entity. Generated examples must come from the same product "
    "category as the seed pair and exhibit similar matching challenges.\n"
    "Corner cases are pairs whose surface form resembles the opposite class: "
    "matches with very dissimilar descriptions, or non-matches with very "
    "similar descriptions. Prefer generating corner cases."
)

DEFAULT_GENERATE_DETAILED_TEMPLATE = PromptTemplate(
    name="generate-detailed",
    body=(
        _DETAILED_BACKGROUND + "\n"
        "Generate three non-matches and one match derived from the seed entity "
        "pair below.\n"
        "Seed pair:\n{seed_pair}\n" + _GENERATION_OUTPUT_GRAMMAR
    ),
)

DEFAULT_GENERATE_DEMONSTRATION_TEMPLATE = PromptTemplate(
    name="generate-demonstration",
    body=(
        _DETAILED_BACKGROUND + "\n"
        "Generate three non-matches and one match derived from the seed entity "
        "pair below.\n"
        "Seed pair:\n{seed_pair}\n"
        "Demonstrations of existing pairs:\n{demonstrations}\n" + _GENERATION_OUTPUT_GRAMMAR
    ),
)

DEFAULT_RELEVANCY_TEMPLATE = PromptTemplate(
    name="relevancy",
    body=(
        "Below is a candidate training example for entity matching. Decide "
        "whether it is interesting.\n"
        "Entity 1: '{entity_left}'\n"
        "Entity 2: '{entity_right}'\n"
        "Answer with a single word: 'keep' or 'discard'."
    ),
)

DEFAULT_TEMPLATES: dict[str, PromptTemplate] = {
    t.name: t
    for t in (
        DEFAULT_MATCH_TEMPLATE,
        DEFAULT_EXPLAIN_LONG_TEMPLATE,
        DEFAULT_EXPLAIN_CONCISE_TEMPLATE,
        DEFAULT_EXPLAIN_STRUCTURED_TEMPLATE,
        DEFAULT_GENERATE_BRIEF_TEMPLATE,
        DEFAULT_GENERATE_DETAILED_TEMPLATE,
        DEFAULT_GENERATE_DEMONSTRATION_TEMPLATE,
        DEFAULT_RELEVANCY_TEMPLATE,
    )
}


def load_template_manifest(path: str | Path) -> dict[str, PromptTemplate]:
    """Read a YAML map of template name -> text file, merged over the defaults."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        manifest = yaml.safe_load(fh) or {}
    if not isinstance(manifest, dict):
        raise TemplateError(f"{path}: template manifest must be a mapping")
    templates = dict(DEFAULT_TEMPLATES)
    for name, rel in manifest.items():
        body = (path.parent / str(rel)).read_text(encoding="utf-8")
        templates[str(name)] = PromptTemplate(name=str(name), body=body)
    return templates


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _yes_no(label: Label) -> str:
    if label is Label.MATCH:
        return "Yes"
    if label is Label.NON_MATCH:
        return "No"
    raise ValueError("pair must be labeled match or non-match")


def format_score(score: float) -> str:
    return f"{score:.2f}"


def render_structured_block(
    explanation: StructuredExplanation,
    variant: RepresentationVariant = RepresentationVariant.STRUCTURED,
) -> str:
    """Render the fenced attribute-line block for a structured explanation.

    The full variant carries similarity and importance; the ablations drop
    importance, or both scores. Fields may not contain '|' or newlines.
    """
    if variant not in STRUCTURED_VARIANTS:
        raise ValueError(f"not a structured variant: {variant.value}")
    lines = ["```"]
    for comp in explanation.comparisons:
        fields = [comp.attribute, comp.value_left, comp.value_right]
        if variant is not RepresentationVariant.STRUCTURED_NO_IMP_SIM:
            if comp.similarity is None:
                raise ValueError(f"comparison {comp.attribute!r} lacks a similarity score")
            fields.append(f"similarity={format_score(comp.similarity)}")
        if variant is RepresentationVariant.STRUCTURED:
            if comp.importance is None:
                raise ValueError(f"comparison {comp.attribute!r} lacks an importance score")
            fields.append(f"importance={format_score(comp.importance)}")
        for value in fields[:3]:
            if "|" in value or "\n" in value:
                raise ValueError(
                    f"comparison field {value!r} may not contain '|' or newlines"
                )
        lines.append(" | ".join(fields))
    lines.append(f"decision: {explanation.decision.value}")
    lines.append("```")
    return "\n".join(lines)


def render_match_prompt(
    pair: CandidatePair,
    rule: SerializationRule,
    template: PromptTemplate | None = None,
) -> list[ChatMessage]:
    """One user message carrying both serialized entity descriptions."""
    template = template or DEFAULT_MATCH_TEMPLATE
    template.require("entity_left", "entity_right")
    content = template.render(
        entity_left=serialize_entity(pair.left, rule),
        entity_right=serialize_entity(pair.right, rule),
    )
    return [user(content)]


def render_finetune_record(
    pair: CandidatePair,
    rule: SerializationRule,
    variant: RepresentationVariant,
    explanation: TextualExplanation | StructuredExplanation | None = None,
    *,
    dataset: str = "",
    template: PromptTemplate | None = None,
    system_message: str | None = None,
) -> FineTuneRecord:
    """Render one training example under any of the six representations."""
    decision = _yes_no(pair.label)
    needs_explanation = variant in EXPLANATION_VARIANTS
    if needs_explanation and explanation is None:
        raise ValueError(f"variant {variant.value} requires an explanation")
    if not needs_explanation and explanation is not None:
        raise ValueError("standard variant takes no explanation")

    if variant is RepresentationVariant.STANDARD:
        completion = decision
    elif variant in STRUCTURED_VARIANTS:
        if not isinstance(explanation, StructuredExplanation):
            raise ValueError(f"variant {variant.value} requires a structured explanation")
        if explanation.decision is not pair.label:
            raise ConsistencyError(
                f"explanation decision {explanation.decision.value!r} contradicts "
                f"pair label {pair.label.value!r}"
            )
        completion = decision + "\n" + render_structured_block(explanation, variant)
    else:
        if not isinstance(explanation, TextualExplanation):
            raise ValueError(f"variant {variant.value} requires a textual explanation")
        completion = decision + "\n" + explanation.text

    messages: list[ChatMessage] = []
    if system_message:
        messages.append(ChatMessage(Role.SYSTEM, system_message))
    messages += render_match_prompt(pair, rule, template)
    messages.append(assistant(completion))
    meta = RecordMeta(left_id=pair.left.id, right_id=pair.right.id, variant=variant, dataset=dataset)
    return FineTuneRecord(messages=tuple(messages), meta=meta)


def _demo_block(pair: CandidatePair, rule: SerializationRule, explanation: str | None = None) -> str:
    lines = [
        f"Entity 1: '{serialize_entity(pair.left, rule)}'",
        f"Entity 2: '{serialize_entity(pair.right, rule)}'",
        f"Answer: {_yes_no(pair.label)}",
    ]
    if explanation is not None:
        lines.append(f"Explanation: {explanation}")
    return "\n".join(lines)


def render_explanation_request(
    pair: CandidatePair,
    rule: SerializationRule,
    style: ExplanationStyle,
    demonstrations: Sequence[tuple[CandidatePair, str]] | None = None,
    template: PromptTemplate | None = None,
) -> list[ChatMessage]:
    """Ask a model to explain the gold label of a pair.

    The long style gives no guidance on the format. The concise style embeds
    demonstration explanations for other pairs (at least one required). The
    structured style embeds the fixed structured-output instruction.
    """
    style = ExplanationStyle(style)
    values = {
        "entity_left": serialize_entity(pair.left, rule),
        "entity_right": serialize_entity(pair.right, rule),
        "label": _yes_no(pair.label),
    }
    if style is ExplanationStyle.LONG:
        template = template or DEFAULT_EXPLAIN_LONG_TEMPLATE
    elif style is ExplanationStyle.CONCISE_WITH_DEMOS:
        if not demonstrations:
            raise ValueError("concise explanation style requires at least one demonstration")
        template = template or DEFAULT_EXPLAIN_CONCISE_TEMPLATE
        values["demonstrations"] = "\n\n".join(
            _demo_block(demo, rule, text) for demo, text in demonstrations
        )
    else:
        template = template or DEFAULT_EXPLAIN_STRUCTURED_TEMPLATE
    return [user(template.render(**values))]


def render_generation_prompt(
    seed: CandidatePair,
    rule: SerializationRule,
    strategy: GenerationStrategy,
    demonstrations: Sequence[CandidatePair] | None = None,
    template: PromptTemplate | None = None,
) -> list[ChatMessage]:
    """Ask a model to synthesize three non-matches and one match from a seed pair."""
    strategy = GenerationStrategy(strategy)
    values = {"seed_pair": _demo_block(seed, rule)}
    if strategy is GenerationStrategy.BRIEF:
        template = template or DEFAULT_GENERATE_BRIEF_TEMPLATE
    elif strategy is GenerationStrategy.DETAILED:
        template = template or DEFAULT_GENERATE_DETAILED_TEMPLATE
    else:
        demos = list(demonstrations or ())
        if len(demos) != DEMONSTRATION_COUNT:
            raise ValueError(
                f"demonstration strategy requires exactly {DEMONSTRATION_COUNT} "
                f"demonstration pairs, got {len(demos)}"
            )
        template = template or DEFAULT_GENERATE_DEMONSTRATION_TEMPLATE
        values["demonstrations"] = "\n\n".join(_demo_block(d, rule) for d in demos)
    return [user(template.render(**values))]


def render_relevancy_prompt(
    pair: CandidatePair,
    rule: SerializationRule,
    template: PromptTemplate | None = None,
) -> list[ChatMessage]:
    """Ask for a keep/discard verdict on whether a pair is interesting."""
    template = template or DEFAULT_RELEVANCY_TEMPLATE
    template.require("entity_left", "entity_right")
    content = template.render(
        entity_left=serialize_entity(pair.left, rule),
        entity_right=serialize_entity(pair.right, rule),
    )
    return [user(content)]


# ---------------------------------------------------------------------------
# Fine-tune file export (provider chat upload format)
# ---------------------------------------------------------------------------


def finetune_record_to_json(record: FineTuneRecord) -> str:
    return json.dumps(record.to_chat_mapping(), ensure_ascii=False)


def write_finetune_file(path: str | Path, records: Iterable[FineTuneRecord]) -> int:
    """Write JSON-lines chat records; returns the number of lines written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(finetune_record_to_json(record) + "\n")
            count += 1
    return count
