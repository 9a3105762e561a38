"""Experiment orchestration: configs, plans, run directories, and stages.

A run owns ``runs/<run-id>/`` exclusively (lock file) and records every stage
in ``manifest.jsonl`` with content hashes of its inputs and outputs, so a
resumed run re-executes only stages whose inputs changed. Artifact files
never contain timestamps or absolute paths; two executions of the same
config with mock backends produce byte-identical artifact trees.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import yaml

from . import costing, curation, evaluation
from .datamodel import (
    Dataset,
    dataset_stats,
    format_stats_table,
    load_dataset,
    load_pair_file,
    write_dataset,
    write_pair_file,
)
from .errors import ConfigError, MatchtuneError
from .gateway import (
    Backend,
    BackendConfig,
    Completion,
    FineTuneConfig,
    FineTuneStatus,
    Usage,
    batch_complete,
    create_finetune_job,
    open_backend,
    total_usage,
    wait_for_finetune,
)
from .promptforge import (
    DEFAULT_TEMPLATES,
    ExplanationStyle,
    PromptTemplate,
    RepresentationVariant,
    load_template_manifest,
    render_finetune_record,
    render_match_prompt,
    write_finetune_file,
)

STAGE_ORDER: dict[str, int] = {
    "ingest": 0,
    "explain": 10,
    "generate": 11,
    "filter": 20,
    "select-errors": 25,
    "build": 30,
    "finetune": 40,
    "predict": 50,
    "evaluate": 60,
    "transfer": 70,
    "cost": 80,
}

#: Curation stages that replace the train split, later ones win.
_TRAIN_SOURCES = ("select-errors", "filter", "generate")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    run_id: str
    seed: int
    dataset_manifests: list[Path]
    source: str
    variant: RepresentationVariant
    stages: list[str]
    backends: dict[str, BackendConfig]
    sections: dict[str, dict]
    templates: dict[str, PromptTemplate]
    config_dir: Path
    raw: dict

    def section(self, stage: str) -> dict:
        return dict(self.sections.get(stage, {}))

    def template(self, name: str | None) -> PromptTemplate | None:
        if name is None:
            return None
        if name not in self.templates:
            raise ConfigError(f"unknown template {name!r}")
        return self.templates[name]

    def backend_config(self, role: str) -> BackendConfig:
        if role not in self.backends:
            raise ConfigError(f"unknown backend role {role!r}")
        return self.backends[role]

    @classmethod
    def from_file(
        cls,
        path: str | Path,
        *,
        backend_overrides: Mapping[str, str] | None = None,
        run_id_override: str | None = None,
    ) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: experiment config must be a mapping")
        config_dir = path.parent

        manifests = [config_dir / str(p) for p in raw.get("datasets", [])]
        if not manifests:
            raise ConfigError("config declares no datasets")
        for manifest in manifests:
            if not manifest.exists():
                raise ConfigError(f"dataset manifest not found: {manifest}")

        stages = [str(s) for s in raw.get("stages", [])]
        if not stages:
            raise ConfigError("config declares no stages")

        backends: dict[str, BackendConfig] = {}
        for role, spec in (raw.get("backends") or {}).items():
            try:
                backends[str(role)] = BackendConfig.from_mapping(spec, base_dir=config_dir)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"backend {role!r}: {exc}") from exc
        for role, target in (backend_overrides or {}).items():
            if target not in backends:
                raise ConfigError(f"--backend override {role}={target}: unknown backend {target!r}")
            backends[role] = backends[target]

        templates = dict(DEFAULT_TEMPLATES)
        if raw.get("templates"):
            templates = load_template_manifest(config_dir / str(raw["templates"]))

        try:
            variant = RepresentationVariant(str(raw.get("variant", "standard")))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

        sections = {
            stage: dict(raw.get(stage.replace("-", "_"), raw.get(stage, {})) or {})
            for stage in STAGE_ORDER
        }

        source = str(raw.get("source", ""))
        run_id = run_id_override or str(raw.get("run_id", "run"))
        config = cls(
            run_id=run_id,
            seed=int(raw.get("seed", 0)),
            dataset_manifests=manifests,
            source=source,
            variant=variant,
            stages=stages,
            backends=backends,
            sections=sections,
            templates=templates,
            config_dir=config_dir,
            raw=raw,
        )
        resolve_plan(config)
        return config


def resolve_plan(config: ExperimentConfig) -> list[str]:
    """Validate the declared stage list against the pipeline partial order."""
    stages = list(config.stages)
    seen = set()
    for stage in stages:
        if stage not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {stage!r}")
        if stage in seen:
            raise ConfigError(f"stage {stage!r} declared twice")
        seen.add(stage)
    for a, b in zip(stages, stages[1:]):
        if STAGE_ORDER[a] > STAGE_ORDER[b]:
            raise ConfigError(f"stage {b!r} must precede {a!r}")
    return stages


_STAGE_ARTIFACTS = {
    "ingest": "canonical splits + stats report per dataset",
    "explain": "explanations.jsonl, exclusions.jsonl, usage.json",
    "generate": "generated.jsonl, train.csv, diagnostics.json, usage.json",
    "filter": "train.csv, predictions.jsonl or judgments.jsonl, usage.json",
    "select-errors": "iteration checkpoints, train.csv, loop.json",
    "build": "train.jsonl, hyperparameters.json",
    "finetune": "job.json, model_ref.json, usage.json",
    "predict": "predictions__<model>__<dataset>.jsonl, usage.json",
    "evaluate": "metrics__<model>__<dataset>.json, report.txt",
    "transfer": "transfer.json, report.txt",
    "cost": "cost.json, report.txt",
}


def describe_plan(config: ExperimentConfig) -> str:
    lines = [f"plan for run {config.run_id!r}:"]
    for stage in resolve_plan(config):
        lines.append(f"  {stage}: {_STAGE_ARTIFACTS[stage]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Hashing and manifest helpers
# ---------------------------------------------------------------------------


def hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_tree(root: Path) -> str:
    """Content hash over (relative path, file hash) pairs, sorted."""
    digest = hashlib.sha256()
    if root.exists():
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            rel = path.relative_to(root).as_posix()
            digest.update(rel.encode("utf-8"))
            digest.update(b"\0")
            digest.update(hash_file(path).encode("ascii"))
            digest.update(b"\n")
    return digest.hexdigest()


def hash_json(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def load_manifest(path: Path) -> dict[str, dict]:
    records: dict[str, dict] = {}
    if path.exists():
        for row in _read_jsonl(path):
            records[row["stage"]] = row
    return records


# ---------------------------------------------------------------------------
# Run context
# ---------------------------------------------------------------------------


class RunContext:
    def __init__(self, config: ExperimentConfig, run_dir: Path, resume: bool) -> None:
        self.config = config
        self.run_dir = run_dir
        self.artifacts = run_dir / "artifacts"
        self.manifest_path = run_dir / "manifest.jsonl"
        self.resume = resume
        self.prior = load_manifest(self.manifest_path)
        self.statuses: dict[str, str] = {}
        self.outputs_hashes: dict[str, str] = {}
        self._datasets: dict[str, Dataset] = {}

    # -- artifacts -------------------------------------------------------------
    def stage_dir(self, stage: str) -> Path:
        return self.artifacts / stage

    def dataset(self, name: str) -> Dataset:
        if name not in self._datasets:
            manifest = self.stage_dir("ingest") / name / "dataset.yaml"
            if not manifest.exists():
                raise ConfigError(f"dataset {name!r} has not been ingested")
            self._datasets[name] = load_dataset(manifest)
        return self._datasets[name]

    def source_dataset(self) -> Dataset:
        return self.dataset(self.config.source)

    def current_trainset(self, before: str) -> Dataset:
        """The source dataset with its train split replaced by the output of
        the latest curation stage executed before ``before``."""
        dataset = self.source_dataset()
        cutoff = STAGE_ORDER[before]
        best = None
        for stage in _TRAIN_SOURCES:
            path = self.stage_dir(stage) / "train.csv"
            if STAGE_ORDER[stage] < cutoff and path.exists():
                if best is None or STAGE_ORDER[stage] > STAGE_ORDER[best]:
                    best = stage
        if best is None:
            return dataset
        pairs = load_pair_file(self.stage_dir(best) / "train.csv", dataset.schema)
        return dataset.with_split("train", pairs)

    def open_backend(self, role: str, stage: str) -> Backend:
        # Call logs live outside artifacts/: their line order follows thread
        # completion, and artifacts must stay byte-deterministic.
        config = self.config.backend_config(role)
        log_dir = self.run_dir / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        return open_backend(config, log_path=log_dir / f"{stage}-{role}.jsonl")

    # -- manifest ----------------------------------------------------------------
    def record(self, stage: str, status: str, inputs_hash: str, outputs_hash: str,
               started: str, finished: str) -> None:
        row = {
            "stage": stage,
            "status": status,
            "inputs_hash": inputs_hash,
            "outputs_hash": outputs_hash,
            "started": started,
            "finished": finished,
        }
        with open(self.manifest_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        self.prior[stage] = row


class _RunLock:
    def __init__(self, run_dir: Path) -> None:
        self._path = run_dir / ".lock"

    def __enter__(self) -> "_RunLock":
        try:
            fd = os.open(self._path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"run directory {self._path.parent} is locked by another process "
                f"(stale? remove {self._path})"
            ) from None
        os.close(fd)
        return self

    def __exit__(self, *exc_info) -> None:
        try:
            self._path.unlink()
        except FileNotFoundError:
            pass


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def _stage_ingest(ctx: RunContext) -> None:
    stage_dir = ctx.stage_dir("ingest")
    stats_rows = []
    names = []
    for manifest in ctx.config.dataset_manifests:
        dataset = load_dataset(manifest)
        names.append(dataset.name)
        write_dataset(dataset, stage_dir / dataset.name)
        stats_rows.append((dataset.name, dataset_stats(dataset)))
    (stage_dir / "stats.txt").write_text(format_stats_table(stats_rows), encoding="utf-8")
    if ctx.config.source not in names:
        raise ConfigError(
            f"source dataset {ctx.config.source!r} is not among the ingested datasets {names}"
        )


def _explanation_mapping(explanation) -> dict:
    from .promptforge import StructuredExplanation, TextualExplanation

    if isinstance(explanation, StructuredExplanation):
        return {
            "kind": "structured",
            "decision": explanation.decision.value,
            "comparisons": [
                {
                    "attribute": c.attribute,
                    "value_left": c.value_left,
                    "value_right": c.value_right,
                    "similarity": c.similarity,
                    "importance": c.importance,
                }
                for c in explanation.comparisons
            ],
        }
    assert isinstance(explanation, TextualExplanation)
    return {"kind": "textual", "text": explanation.text, "style": explanation.style}


def _explanation_from_mapping(data: Mapping):
    from .datamodel import Label
    from .promptforge import AttributeComparison, StructuredExplanation, TextualExplanation

    if data["kind"] == "structured":
        return StructuredExplanation(
            comparisons=tuple(
                AttributeComparison(
                    attribute=c["attribute"],
                    value_left=c["value_left"],
                    value_right=c["value_right"],
                    similarity=c["similarity"],
                    importance=c["importance"],
                )
                for c in data["comparisons"]
            ),
            decision=Label(data["decision"]),
        )
    return TextualExplanation(text=data["text"], style=data["style"])


def _stage_explain(ctx: RunContext) -> None:
    section = ctx.config.section("explain")
    style = ExplanationStyle(section.get("style", "structured"))
    backend = ctx.open_backend(section.get("backend", "explainer"), "explain")
    trainset = ctx.current_trainset("explain")
    demonstrations = None
    if section.get("demonstrations"):
        by_id = {p.id_pair: p for p in trainset.split("train")}
        demonstrations = []
        for demo in section["demonstrations"]:
            key = (str(demo["left_id"]), str(demo["right_id"]))
            if key not in by_id:
                raise ConfigError(f"demonstration pair {key} not found in train split")
            demonstrations.append((by_id[key], str(demo["text"])))
    result = curation.attach_explanations(
        trainset,
        style,
        backend,
        demonstrations=demonstrations,
        fallback=str(section.get("fallback", "exclude")),
        max_retries=int(section.get("max_retries", 2)),
        template=ctx.config.template(section.get("template")),
        max_in_flight=int(section.get("max_in_flight", 8)),
    )
    stage_dir = ctx.stage_dir("explain")
    pairs = trainset.split("train")
    with open(stage_dir / "explanations.jsonl", "w", encoding="utf-8") as fh:
        for ref, explanation in result.explanations:
            pair = pairs[ref.index]
            row = {
                "left_id": pair.left.id,
                "right_id": pair.right.id,
                "style": style.value,
                "explanation": _explanation_mapping(explanation),
            }
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    with open(stage_dir / "exclusions.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.exclusions:
            fh.write(json.dumps(entry.to_mapping(), ensure_ascii=False, sort_keys=True) + "\n")
    summary = [
        f"style: {style.value}",
        f"pairs explained: {len(result.explanations)}",
        f"pairs excluded: {len(result.exclusions)}",
        f"pairs downgraded to standard: {len(result.downgraded)}",
    ]
    for entry in result.exclusions:
        summary.append(f"  excluded train[{entry.ref.index}] after {entry.attempts} attempts: {entry.reason}")
    (stage_dir / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    _write_json(stage_dir / "usage.json", {
        "input_tokens": result.usage.input_tokens,
        "output_tokens": result.usage.output_tokens,
        "explained": len(result.explanations),
        "excluded": len(result.exclusions),
    })


def _stage_generate(ctx: RunContext) -> None:
    from .datamodel import combine_datasets
    from .promptforge import GenerationStrategy

    section = ctx.config.section("generate")
    strategy = GenerationStrategy(section.get("strategy", "brief"))
    backend = ctx.open_backend(section.get("backend", "generator"), "generate")
    trainset = ctx.current_trainset("generate")
    result = curation.generate_examples(
        trainset,
        backend,
        strategy,
        template=ctx.config.template(section.get("template")),
        max_in_flight=int(section.get("max_in_flight", 8)),
    )
    combined = combine_datasets(trainset, result.pairs, dedup=True)
    stage_dir = ctx.stage_dir("generate")
    write_pair_file(stage_dir / "train.csv", combined.split("train"), trainset.schema)
    with open(stage_dir / "generated.jsonl", "w", encoding="utf-8") as fh:
        for batch in result.batches:
            row = {
                "seed": list(batch.seed_ref),
                "strategy": batch.strategy.value,
                "pairs": [curation.pair_to_mapping(p) for p in batch.pairs],
                "skipped": list(batch.skipped),
                "composition_ok": batch.composition_ok,
            }
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    _write_json(stage_dir / "diagnostics.json", {
        "seeds": len(trainset.split("train")),
        "batches": len(result.batches),
        "failures": list(result.failures),
        "generated_pairs": len(result.pairs),
        "combined_train_size": len(combined.split("train")),
        "off_composition": sum(1 for b in result.batches if not b.composition_ok),
    })
    _write_json(stage_dir / "usage.json", {
        "input_tokens": result.usage.input_tokens,
        "output_tokens": result.usage.output_tokens,
    })


def _stage_filter(ctx: RunContext) -> None:
    section = ctx.config.section("filter")
    kind = str(section.get("kind", "error"))
    backend = ctx.open_backend(section.get("backend", "judge"), "filter")
    trainset = ctx.current_trainset("filter")
    stage_dir = ctx.stage_dir("filter")
    template = ctx.config.template(section.get("template"))
    max_in_flight = int(section.get("max_in_flight", 8))
    before = len(trainset.split("train"))
    if kind == "error":
        predictions, usage = curation.judge_predictions(
            trainset, "train", backend, template=template, max_in_flight=max_in_flight
        )
        curation.write_predictions(stage_dir / "predictions.jsonl", predictions)
        filtered = curation.error_filter(trainset, predictions)
    elif kind == "relevancy":
        judgments, unparsed, usage = curation.judge_relevancy(
            trainset, "train", backend, template=template, max_in_flight=max_in_flight
        )
        curation.write_judgments(stage_dir / "judgments.jsonl", judgments)
        _write_json(stage_dir / "diagnostics.json", {"unparsed_verdicts": unparsed})
        filtered = curation.relevancy_filter(trainset, judgments)
    else:
        raise ConfigError(f"unknown filter kind {kind!r}")
    write_pair_file(stage_dir / "train.csv", filtered.split("train"), trainset.schema)
    after = len(filtered.split("train"))
    (stage_dir / "summary.txt").write_text(
        f"filter kind: {kind}\npairs before: {before}\npairs after: {after}\n",
        encoding="utf-8",
    )
    _write_json(stage_dir / "usage.json", {
        "input_tokens": usage.input_tokens,
        "output_tokens": usage.output_tokens,
    })


def _stage_select_errors(ctx: RunContext) -> None:
    section = ctx.config.section("select-errors")
    backend = ctx.open_backend(section.get("backend", "target"), "select-errors")
    trainset = ctx.current_trainset("select-errors")
    pool_name = section.get("pool_dataset")
    if not pool_name:
        raise ConfigError("select-errors needs a pool_dataset")
    pool = ctx.dataset(str(pool_name)).split(str(section.get("pool_split", "train")))
    stage_dir = ctx.stage_dir("select-errors")
    result = curation.run_error_selection_loop(
        trainset,
        pool,
        backend,
        iterations=int(section.get("iterations", 5)),
        batch_size=int(section.get("batch_size", 2500)),
        epochs_per_iteration=int(section.get("epochs_per_iteration", 5)),
        workdir=stage_dir / "loop",
        max_in_flight=int(section.get("max_in_flight", 8)),
    )
    final_train = list(trainset.split("train"))
    for iteration in result.iterations:
        final_train.extend(iteration.selected)
    write_pair_file(stage_dir / "train.csv", final_train, trainset.schema)
    _write_json(stage_dir / "loop.json", {
        "iterations": [it.to_mapping() for it in result.iterations],
        "best_model": result.best_model,
        "best_iteration": result.best_iteration,
    })


def _stage_build(ctx: RunContext) -> None:
    section = ctx.config.section("build")
    variant = RepresentationVariant(section.get("variant", ctx.config.variant.value))
    system_message = section.get("system_message")
    trainset = ctx.current_trainset("build")
    stage_dir = ctx.stage_dir("build")

    explanations: dict[tuple[str, str], object] = {}
    explain_path = ctx.stage_dir("explain") / "explanations.jsonl"
    if explain_path.exists():
        for row in _read_jsonl(explain_path):
            explanations[(row["left_id"], row["right_id"])] = _explanation_from_mapping(
                row["explanation"]
            )

    records = []
    missing = []
    needs_explanation = variant is not RepresentationVariant.STANDARD
    for i, pair in enumerate(trainset.split("train")):
        if needs_explanation:
            explanation = explanations.get(pair.id_pair)
            if explanation is None:
                missing.append({"index": i, "left_id": pair.left.id, "right_id": pair.right.id})
                continue
        else:
            explanation = None
        records.append(
            render_finetune_record(
                pair,
                trainset.serialization,
                variant,
                explanation,
                dataset=trainset.name,
                template=ctx.config.template(section.get("template")),
                system_message=system_message,
            )
        )
    if not records:
        raise MatchtuneError("build produced no training records")
    write_finetune_file(stage_dir / "train.jsonl", records)
    if section.get("validation_file"):
        validation_records = [
            render_finetune_record(
                p, trainset.serialization, RepresentationVariant.STANDARD,
                dataset=trainset.name,
            )
            for p in trainset.split("validation")
        ]
        write_finetune_file(stage_dir / "validation.jsonl", validation_records)
    finetune_section = ctx.config.section("finetune")
    config = _finetune_config(finetune_section)
    hyper = config.to_mapping()
    _write_json(stage_dir / "hyperparameters.json", hyper)
    if missing:
        with open(stage_dir / "build_exclusions.jsonl", "w", encoding="utf-8") as fh:
            for row in missing:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _finetune_config(section: Mapping) -> FineTuneConfig:
    known = {k: section[k] for k in ("epochs", "learning_rate_multiplier", "batch_size", "lora")
             if k in section}
    return FineTuneConfig.from_mapping(known)


def _stage_finetune(ctx: RunContext) -> None:
    section = ctx.config.section("finetune")
    backend = ctx.open_backend(section.get("backend", "target"), "finetune")
    stage_dir = ctx.stage_dir("finetune")
    build_dir = ctx.stage_dir("build")
    training_file = build_dir / "train.jsonl"
    if not training_file.exists():
        raise ConfigError("finetune requires the build stage's train.jsonl")
    validation_file = build_dir / "validation.jsonl"
    config = _finetune_config(section)
    job = create_finetune_job(
        backend,
        training_file,
        validation_file if validation_file.exists() else None,
        config,
    )
    job = wait_for_finetune(backend, job)
    if job.status is not FineTuneStatus.SUCCEEDED:
        raise MatchtuneError(f"fine-tune job {job.job_id} ended in status {job.status.value}")
    _write_json(stage_dir / "job.json", job.to_mapping())

    policy = str(section.get("selection", "best-validation-f1"))
    usage = Usage()
    checkpoint_f1s: dict[str, float] = {}
    if policy == "final" or len(job.checkpoints) == 1:
        model_ref = job.checkpoints[-1].model_id
    elif policy == "best-validation-f1":
        dataset = ctx.source_dataset()
        validation = dataset.split("validation")
        gold = [p.label for p in validation]
        evals = []
        for checkpoint in job.checkpoints:
            decisions, ckpt_usage = _predict_decisions(
                backend.for_model(checkpoint.model_id), dataset, validation,
                int(section.get("max_in_flight", 8)),
            )
            usage = usage + ckpt_usage
            report = evaluation.compute_metrics(decisions, gold)
            checkpoint_f1s[checkpoint.model_id] = report.f1
            evals.append((checkpoint.model_id, report))
        model_ref = evaluation.select_best_checkpoint(evals)
    else:
        raise ConfigError(f"unknown checkpoint selection policy {policy!r}")
    _write_json(stage_dir / "model_ref.json", {
        "model_ref": model_ref,
        "policy": policy,
        "checkpoint_f1s": checkpoint_f1s,
    })
    _write_json(stage_dir / "usage.json", {
        "input_tokens": usage.input_tokens,
        "output_tokens": usage.output_tokens,
        "trained_tokens": job.trained_tokens,
    })


def _predict_decisions(
    backend: Backend,
    dataset: Dataset,
    pairs,
    max_in_flight: int,
) -> tuple[list[evaluation.Decision], Usage]:
    requests = [render_match_prompt(p, dataset.serialization) for p in pairs]
    results = batch_complete(backend, requests, max_in_flight)
    decisions = [
        evaluation.parse_decision(r.text) if isinstance(r, Completion)
        else evaluation.Decision(evaluation.DecisionValue.UNPARSED)
        for r in results
    ]
    return decisions, total_usage(results)


def _eval_targets(ctx: RunContext) -> list[str]:
    section = ctx.config.section("evaluate")
    targets = [str(t) for t in section.get("targets", [])]
    return targets or [ctx.config.source]


def _model_tags(ctx: RunContext) -> dict[str, str]:
    tags = {"zero-shot": ctx.config.backend_config(
        ctx.config.section("predict").get("backend", "target")).model}
    model_ref_path = ctx.stage_dir("finetune") / "model_ref.json"
    if model_ref_path.exists():
        tags["tuned"] = json.loads(model_ref_path.read_text(encoding="utf-8"))["model_ref"]
    return tags


def _stage_predict(ctx: RunContext) -> None:
    section = ctx.config.section("predict")
    backend = ctx.open_backend(section.get("backend", "target"), "predict")
    stage_dir = ctx.stage_dir("predict")
    max_in_flight = int(section.get("max_in_flight", 8))
    usage_map: dict[str, dict] = {}
    for tag, model_id in _model_tags(ctx).items():
        model_backend = backend.for_model(model_id)
        for target in _eval_targets(ctx):
            dataset = ctx.dataset(target)
            predictions, usage = curation.judge_predictions(
                dataset, "test", model_backend, max_in_flight=max_in_flight
            )
            curation.write_predictions(
                stage_dir / f"predictions__{tag}__{target}.jsonl", predictions
            )
            usage_map[f"{tag}__{target}"] = {
                "input_tokens": usage.input_tokens,
                "output_tokens": usage.output_tokens,
                "requests": len(predictions),
            }
    _write_json(stage_dir / "usage.json", usage_map)


def _stage_evaluate(ctx: RunContext) -> None:
    stage_dir = ctx.stage_dir("evaluate")
    predict_dir = ctx.stage_dir("predict")
    reports: dict[str, dict[str, evaluation.MetricsReport]] = {}
    for path in sorted(predict_dir.glob("predictions__*.jsonl")):
        _, tag, target = path.stem.split("__", 2)
        dataset = ctx.dataset(target)
        predictions = curation.load_predictions(path, dataset)
        gold = [p.label for p in dataset.split("test")]
        decisions = [p.decision for p in predictions]
        report = evaluation.compute_metrics(decisions, gold)
        reports.setdefault(tag, {})[target] = report
        _write_json(stage_dir / f"metrics__{tag}__{target}.json", report.to_mapping())
    lines = []
    for tag in sorted(reports):
        for target in sorted(reports[tag]):
            report = reports[tag][target]
            lines.append(
                f"{tag} on {target}: F1 {report.f1_display:.2f} "
                f"(P {report.precision:.4f} R {report.recall:.4f}, unparsed {report.unparsed})"
            )
    (stage_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _metrics_f1(ctx: RunContext, tag: str, target: str) -> float:
    path = ctx.stage_dir("evaluate") / f"metrics__{tag}__{target}.json"
    if not path.exists():
        raise ConfigError(f"transfer needs evaluation output {path.name}")
    return float(json.loads(path.read_text(encoding="utf-8"))["f1_display"])


def _stage_transfer(ctx: RunContext) -> None:
    section = ctx.config.section("transfer")
    stage_dir = ctx.stage_dir("transfer")
    source = ctx.config.source
    source_domain = ctx.source_dataset().domain
    reference = {str(k): float(v) for k, v in (section.get("reference_f1") or {}).items()}
    records_in: list[evaluation.TransferGainRecord] = []
    records_cross: list[evaluation.TransferGainRecord] = []
    no_transfer = None
    for target in _eval_targets(ctx):
        f0 = _metrics_f1(ctx, "zero-shot", target)
        f_transfer = _metrics_f1(ctx, "tuned", target)
        if target == source:
            no_transfer = f_transfer
            continue
        f_target = reference.get(target)
        if f_target is None:
            raise ConfigError(
                f"transfer target {target!r} needs a reference_f1 entry "
                "(the F1 of a model fine-tuned on that target)"
            )
        record = evaluation.TransferGainRecord.compute(target, f0, f_transfer, f_target)
        if ctx.dataset(target).domain == source_domain:
            records_in.append(record)
        else:
            records_cross.append(record)
    in_domain = evaluation.aggregate_transfer_gain(records_in, source=source, domain=source_domain)
    cross_domain_name = (
        ctx.dataset(records_cross[0].target).domain if records_cross else "cross"
    )
    cross = evaluation.aggregate_transfer_gain(
        records_cross, source=source, domain=cross_domain_name
    )
    _write_json(stage_dir / "transfer.json", {
        "source": source,
        "no_transfer_f1": no_transfer,
        "in_domain": in_domain.to_mapping(),
        "cross_domain": cross.to_mapping(),
    })
    (stage_dir / "report.txt").write_text(
        evaluation.format_transfer_table(source, no_transfer, in_domain, cross),
        encoding="utf-8",
    )


def _stage_cost(ctx: RunContext) -> None:
    section = ctx.config.section("cost")
    sheet_path = section.get("pricing_sheet")
    if not sheet_path:
        raise ConfigError("cost stage needs a pricing_sheet path")
    sheet = costing.load_pricing_sheet(ctx.config.config_dir / str(sheet_path))
    model = str(section.get("model") or ctx.config.backend_config(
        ctx.config.section("predict").get("backend", "target")).model)
    stage_dir = ctx.stage_dir("cost")

    predict_usage = json.loads(
        (ctx.stage_dir("predict") / "usage.json").read_text(encoding="utf-8")
    )

    def _sum_usage(prefix: str) -> tuple[int, int, int]:
        tokens_in = tokens_out = requests = 0
        for key, entry in predict_usage.items():
            if key.startswith(prefix + "__"):
                tokens_in += entry["input_tokens"]
                tokens_out += entry["output_tokens"]
                requests += entry["requests"]
        return tokens_in, tokens_out, requests

    ledgers: list[tuple[str, costing.UsageLedger]] = []
    zs_in, zs_out, zs_n = _sum_usage("zero-shot")
    ledgers.append((model, costing.UsageLedger(
        scenario=costing.Scenario.ZERO_SHOT,
        input_tokens=zs_in, output_tokens=zs_out,
        inference_examples=zs_n, label="Zero-shot",
    )))
    job_path = ctx.stage_dir("finetune") / "job.json"
    if job_path.exists():
        job = json.loads(job_path.read_text(encoding="utf-8"))
        train_lines = (ctx.stage_dir("build") / "train.jsonl").read_text(encoding="utf-8")
        train_count = sum(1 for line in train_lines.splitlines() if line.strip())
        ft_in, ft_out, ft_n = _sum_usage("tuned")
        ledgers.append((model, costing.UsageLedger(
            scenario=costing.Scenario.FINE_TUNED,
            input_tokens=ft_in, output_tokens=ft_out,
            training_tokens=int(job["trained_tokens"]),
            training_examples=train_count,
            inference_examples=ft_n, label="Fine-tuned",
        )))
    report = costing.build_cost_report(ledgers, sheet)

    auxiliary = {}
    for stage in ("explain", "filter", "generate", "finetune"):
        usage_path = ctx.stage_dir(stage) / "usage.json"
        if usage_path.exists():
            auxiliary[stage] = json.loads(usage_path.read_text(encoding="utf-8"))
    payload = json.loads(report.to_json())
    payload["auxiliary_usage"] = auxiliary
    payload["token_counts_are_estimates"] = True
    _write_json(stage_dir / "cost.json", payload)
    (stage_dir / "report.txt").write_text(
        costing.format_cost_table(report) + "note: mock token counts are estimates\n",
        encoding="utf-8",
    )


_STAGE_FNS = {
    "ingest": _stage_ingest,
    "explain": _stage_explain,
    "generate": _stage_generate,
    "filter": _stage_filter,
    "select-errors": _stage_select_errors,
    "build": _stage_build,
    "finetune": _stage_finetune,
    "predict": _stage_predict,
    "evaluate": _stage_evaluate,
    "transfer": _stage_transfer,
    "cost": _stage_cost,
}


# ---------------------------------------------------------------------------
# Run driver
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    statuses: dict[str, str]


def _config_snapshot(config: ExperimentConfig) -> str:
    return json.dumps(config.raw, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def _environment_hash(config: ExperimentConfig) -> str:
    """Hash of every external file the run depends on: dataset manifests and
    their split files, replay fixtures, template files, and pricing sheets.
    Any change re-executes all stages on resume (conservative but correct)."""
    digest = hashlib.sha256()
    files: list[Path] = []
    for manifest in config.dataset_manifests:
        files.append(manifest)
        with open(manifest, encoding="utf-8") as fh:
            parsed = yaml.safe_load(fh)
        for rel in (parsed.get("splits") or {}).values():
            files.append(manifest.parent / str(rel))
    for backend in config.backends.values():
        if backend.fixture_path:
            files.append(Path(backend.fixture_path))
    sheet = config.section("cost").get("pricing_sheet")
    if sheet:
        files.append(config.config_dir / str(sheet))
    for path in sorted(set(files)):
        digest.update(path.name.encode("utf-8"))
        digest.update(b"\0")
        if path.exists():
            digest.update(hash_file(path).encode("ascii"))
        digest.update(b"\n")
    return digest.hexdigest()


def execute_run(
    config: ExperimentConfig,
    *,
    runs_root: str | Path = "runs",
    resume: bool = False,
    dry_run: bool = False,
    through: str | None = None,
) -> RunResult:
    """Execute the configured plan (optionally only through one stage)."""
    plan = resolve_plan(config)
    if "ingest" not in plan:
        plan = ["ingest"] + plan
    if through is not None:
        if through not in plan:
            raise ConfigError(f"stage {through!r} is not part of the configured plan")
        plan = plan[: plan.index(through) + 1]

    run_dir = Path(runs_root) / config.run_id
    if dry_run:
        return RunResult(run_dir=run_dir, statuses={stage: "planned" for stage in plan})

    if run_dir.exists() and load_manifest(run_dir / "manifest.jsonl") and not resume:
        raise ConfigError(
            f"run directory {run_dir} already has a manifest; pass --resume to continue"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    random.seed(config.seed)

    with _RunLock(run_dir):
        snapshot_path = run_dir / "config.snapshot"
        snapshot = _config_snapshot(config)
        if snapshot_path.exists() and snapshot_path.read_text(encoding="utf-8") != snapshot:
            raise ConfigError("config does not match the existing run's snapshot")
        snapshot_path.write_text(snapshot, encoding="utf-8")
        _write_json(run_dir / "run.json", {
            "run_id": config.run_id,
            "config_snapshot_hash": hashlib.sha256(snapshot.encode("utf-8")).hexdigest(),
        })

        ctx = RunContext(config, run_dir, resume)
        env_hash = _environment_hash(config)
        upstream = hash_json({"seed": config.seed})
        for stage in plan:
            inputs_hash = hash_json({
                "stage": stage,
                "section": config.section(stage),
                "upstream": upstream,
                "environment": env_hash,
            })
            prior = ctx.prior.get(stage)
            stage_dir = ctx.stage_dir(stage)
            if (
                resume
                and prior
                and prior["status"] == "done"
                and prior["inputs_hash"] == inputs_hash
                and stage_dir.exists()
                and hash_tree(stage_dir) == prior["outputs_hash"]
            ):
                ctx.statuses[stage] = "skipped"
                upstream = prior["outputs_hash"]
                continue
            started = _utc_now()
            if stage_dir.exists():
                _clear_tree(stage_dir)
            stage_dir.mkdir(parents=True, exist_ok=True)
            try:
                _STAGE_FNS[stage](ctx)
            except Exception:
                ctx.record(stage, "failed", inputs_hash, "", started, _utc_now())
                ctx.statuses[stage] = "failed"
                raise
            outputs_hash = hash_tree(stage_dir)
            ctx.record(stage, "done", inputs_hash, outputs_hash, started, _utc_now())
            ctx.statuses[stage] = "done"
            upstream = outputs_hash
        return RunResult(run_dir=run_dir, statuses=ctx.statuses)


def _clear_tree(root: Path) -> None:
    for path in sorted(root.rglob("*"), reverse=True):
        if path.is_file():
            path.unlink()
        else:
            path.rmdir()
    root.rmdir()


# ---------------------------------------------------------------------------
# Standalone transfer matrices (CLI `transfer --matrix`)
# ---------------------------------------------------------------------------


def transfer_from_matrix(matrix: Mapping) -> list[evaluation.DomainAggregate]:
    """Compute per-source domain aggregates from an evaluation matrix.

    The matrix holds display-scale F1 values: ``zero_shot`` per target,
    ``tuned[source][target]``, and ``domains[target]``. The diagonal
    ``tuned[t][t]`` supplies the target-tuned reference F1.
    """
    zero_shot = {str(k): float(v) for k, v in matrix["zero_shot"].items()}
    tuned = {str(s): {str(t): float(v) for t, v in row.items()}
             for s, row in matrix["tuned"].items()}
    domains = {str(k): str(v) for k, v in matrix["domains"].items()}
    aggregates = []
    for source, row in tuned.items():
        by_domain: dict[str, list[evaluation.TransferGainRecord]] = {}
        for target in zero_shot:
            if target == source or target not in row:
                continue
            record = evaluation.TransferGainRecord.compute(
                target, zero_shot[target], row[target], tuned[target][target]
            )
            by_domain.setdefault(domains[target], []).append(record)
        for domain in sorted(by_domain):
            aggregates.append(
                evaluation.aggregate_transfer_gain(
                    by_domain[domain], source=source, domain=domain
                )
            )
    return aggregates
