"""Command-line entry point.

One subcommand per pipeline stage plus ``run`` (full plan), ``stats``
(dataset statistics report), and a standalone ``transfer --matrix`` mode
that consumes an evaluation matrix file. Stage subcommands execute the
configured plan up to and including that stage, skipping stages whose
artifacts are already up to date.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datamodel import dataset_stats, format_stats_table, load_dataset
from .errors import ConfigError, MatchtuneError
from .runner import ExperimentConfig, describe_plan, execute_run, transfer_from_matrix

_STAGE_COMMANDS = (
    "ingest", "explain", "generate", "filter", "select-errors",
    "build", "finetune", "predict", "evaluate", "transfer", "cost",
)


def _add_run_args(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", "-c", required=config_required,
                        help="experiment config file")
    parser.add_argument("--run-id", default=None, help="override the config's run id")
    parser.add_argument("--runs-root", default="runs", help="directory holding run directories")
    parser.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    parser.add_argument("--resume", action="store_true",
                        help="continue an existing run, skipping up-to-date stages")
    parser.add_argument("--backend", action="append", default=[], metavar="ROLE=OTHER",
                        help="remap a backend role to another configured backend")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchtune",
        description="Build, curate, and evaluate fine-tuning datasets for entity matching.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute the full configured plan")
    _add_run_args(run)

    for stage in _STAGE_COMMANDS:
        stage_parser = sub.add_parser(stage, help=f"execute the plan through the {stage} stage")
        _add_run_args(stage_parser, config_required=stage != "transfer")
        if stage == "transfer":
            stage_parser.add_argument("--matrix", default=None,
                                      help="standalone mode: evaluation matrix JSON file")
            stage_parser.add_argument("--out", default=None,
                                      help="write standalone aggregates to this JSON file")

    stats = sub.add_parser("stats", help="print a dataset statistics table")
    stats.add_argument("--config", "-c", default=None, help="experiment config file")
    stats.add_argument("--dataset", default=None, help="single dataset manifest")
    return parser


def _parse_overrides(raw: list[str]) -> dict[str, str]:
    overrides = {}
    for item in raw:
        if "=" not in item:
            raise ConfigError(f"--backend expects ROLE=OTHER, got {item!r}")
        role, target = item.split("=", 1)
        overrides[role.strip()] = target.strip()
    return overrides


def _cmd_stats(args: argparse.Namespace) -> int:
    if not args.config and not args.dataset:
        raise ConfigError("stats needs --config or --dataset")
    rows = []
    if args.dataset:
        dataset = load_dataset(args.dataset)
        rows.append((dataset.name, dataset_stats(dataset)))
    else:
        config = ExperimentConfig.from_file(args.config)
        for manifest in config.dataset_manifests:
            dataset = load_dataset(manifest)
            rows.append((dataset.name, dataset_stats(dataset)))
    sys.stdout.write(format_stats_table(rows))
    return 0


def _cmd_transfer_matrix(args: argparse.Namespace) -> int:
    with open(args.matrix, encoding="utf-8") as fh:
        matrix = json.load(fh)
    aggregates = transfer_from_matrix(matrix)
    payload = [a.to_mapping() for a in aggregates]
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    for aggregate in aggregates:
        pct = "undefined" if aggregate.aggregate_percent is None else f"{aggregate.aggregate_percent}%"
        sys.stdout.write(f"{aggregate.source} -> {aggregate.domain}: {pct}\n")
    return 0


def _cmd_run(args: argparse.Namespace, through: str | None) -> int:
    if not args.config:
        raise ConfigError(f"{args.command} needs --config (or --matrix for transfer)")
    config = ExperimentConfig.from_file(
        args.config,
        backend_overrides=_parse_overrides(args.backend),
        run_id_override=args.run_id,
    )
    if args.dry_run:
        sys.stdout.write(describe_plan(config))
        return 0
    result = execute_run(
        config,
        runs_root=args.runs_root,
        resume=args.resume,
        through=through,
    )
    for stage, status in result.statuses.items():
        sys.stdout.write(f"{stage}: {status}\n")
    sys.stdout.write(f"run directory: {result.run_dir}\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "stats":
            return _cmd_stats(args)
        if args.command == "transfer" and getattr(args, "matrix", None):
            return _cmd_transfer_matrix(args)
        if args.command == "run":
            return _cmd_run(args, through=None)
        return _cmd_run(args, through=args.command)
    except MatchtuneError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"i/o error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
