"""Exception types shared across the toolkit."""

from __future__ import annotations


class MatchtuneError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(MatchtuneError):
    """A record, rule, or file does not conform to the declared schema."""


class DuplicatePairError(MatchtuneError):
    """The same (left_id, right_id) pair appears twice within one split."""


class TemplateError(MatchtuneError):
    """A prompt template is malformed or a placeholder cannot be resolved."""


class ConsistencyError(MatchtuneError):
    """An explanation's decision contradicts the gold label."""


class GatewayError(MatchtuneError):
    """A backend request failed (transport error, provider rejection, ...)."""


class FixtureError(GatewayError):
    """A replay backend has no recorded response for a request hash."""


class TrainingFileError(MatchtuneError):
    """A fine-tune training file failed validation before upload."""


class GenerationParseError(MatchtuneError):
    """A generation response yielded zero parseable pairs."""

    def __init__(self, message: str, raw_text: str = "") -> None:
        super().__init__(message)
        self.raw_text = raw_text


class ExplanationParseError(MatchtuneError):
    """A structured-explanation block could not be parsed."""


class ScoreRangeError(ExplanationParseError):
    """A similarity or importance score fell outside [0, 1]."""


class SelectionError(MatchtuneError):
    """The eligible selection pool is smaller than the requested batch."""


class PricingError(MatchtuneError):
    """A pricing sheet lacks the rates required for a computation."""


class ConfigError(MatchtuneError):
    """An experiment configuration is invalid or ill-ordered."""
