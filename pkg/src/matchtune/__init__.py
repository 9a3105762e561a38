"""matchtune: build, curate, and evaluate fine-tuning datasets for
LLM-based entity matching."""

from .datamodel import (
    CandidatePair,
    Dataset,
    EntityRecord,
    Label,
    Provenance,
    SerializationRule,
    SplitStats,
    combine_datasets,
    dataset_stats,
    load_dataset,
    serialize_entity,
)
from .errors import MatchtuneError
from .evaluation import (
    MetricsReport,
    compute_metrics,
    parse_decision,
    transfer_gain,
)
from .gateway import BackendConfig, FineTuneConfig, open_backend
from .promptforge import (
    FineTuneRecord,
    RepresentationVariant,
    StructuredExplanation,
    render_finetune_record,
    render_match_prompt,
)

__version__ = "0.1.0"

__all__ = [
    "BackendConfig",
    "CandidatePair",
    "Dataset",
    "EntityRecord",
    "FineTuneConfig",
    "FineTuneRecord",
    "Label",
    "MatchtuneError",
    "MetricsReport",
    "Provenance",
    "RepresentationVariant",
    "SerializationRule",
    "SplitStats",
    "StructuredExplanation",
    "combine_datasets",
    "compute_metrics",
    "dataset_stats",
    "load_dataset",
    "open_backend",
    "parse_decision",
    "render_finetune_record",
    "render_match_prompt",
    "serialize_entity",
    "transfer_gain",
    "__version__",
]
