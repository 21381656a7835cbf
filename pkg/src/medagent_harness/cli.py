"""Command-line interface for medagent-harness."""

from __future__ import annotations

import argparse
import re
import shutil
import sys
from pathlib import Path
from typing import TYPE_CHECKING

from loguru import logger

from .backend import FakeClock, RouteConfigError, Router, SystemClock
from .config import ConfigError, RunOverrides, load_run_config
from .domain import (
    ROLE_DOCTOR,
    ROLE_MEASUREMENT,
    ROLE_MODERATOR,
    ROLE_PATIENT,
    ROLE_SYSTEM,
    expert_name,
    expert_role,
)
from .evalkit import (
    CONVERTERS,
    DatasetError,
    DatasetKind,
    PipelineSettings,
    TranscriptError,
    convert_dataset,
    evaluate,
    load_dataset,
    load_transcript,
    sample,
    scan_dataset,
    write_reports,
)
from .logging import LogConfig, add_run_log, setup_logging

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .backend import Clock
    from .domain import Transcript

EXIT_OK = 0
EXIT_TRANSCRIPT = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3

_ROLE_LABELS = {
    ROLE_DOCTOR: "Doctor",
    ROLE_PATIENT: "Patient",
    ROLE_MEASUREMENT: "Measurement",
    ROLE_MODERATOR: "Moderator",
}
_LABEL_ROLES = {label: role for role, label in _ROLE_LABELS.items()}
_INDENT = "    "
_STAGE_LABEL = re.compile(r"^\[(?P<stage>[^\]]+)\]:(?: |$)")
_EXPERT_LABEL = re.compile(r"^(?P<name>[^:\[]+?) Expert:(?: |$)")
_ROLE_LABEL = re.compile(r"^(?P<label>[A-Z][a-z]+):(?: |$)")


def _label(role: str) -> str | None:
    if role == ROLE_SYSTEM:
        return None
    if role in _ROLE_LABELS:
        return _ROLE_LABELS[role]
    name = expert_name(role)
    if name is not None:
        return f"{name} Expert"
    return f"[{role}]"


def render_transcript(transcript: Transcript) -> str:
    """Render a transcript as ``Label: text`` blocks; system events print bare.

    Continuation lines of multi-line text are indented by four spaces.
    """
    blocks: list[str] = []
    for event in transcript.events:
        first, *rest = event.text.split("\n") if event.text else [""]
        label = _label(event.role)
        head = first if label is None else f"{label}: {first}"
        lines = [head.rstrip(), *(f"{_INDENT}{line}" for line in rest)]
        blocks.append("\n".join(lines))
    return "\n".join(blocks) + "\n"


def parse_rendered_roles(text: str) -> list[str]:
    """Recover the role sequence from ``render_transcript`` output."""
    roles: list[str] = []
    for line in text.splitlines():
        if line.startswith(_INDENT):
            continue
        if match := _STAGE_LABEL.match(line):
            roles.append(match.group("stage"))
        elif (match := _ROLE_LABEL.match(line)) and match.group("label") in _LABEL_ROLES:
            roles.append(_LABEL_ROLES[match.group("label")])
        elif match := _EXPERT_LABEL.match(line):
            roles.append(expert_role(match.group("name")))
        else:
            roles.append(ROLE_SYSTEM)
    return roles


def cmd_run(
    config_path: Path,
    overrides: RunOverrides | None = None,
    *,
    json_logs: bool = False,
    clock: Clock | None = None,
) -> int:
    """Execute one configured evaluation run and write its artifacts.

    Args:
        config_path: Run configuration file.
        overrides: Command-line overrides for seeds, workers and output directory.
        json_logs: Serialize ``run.log`` as JSON lines.
        clock: Clock for backends and runtimes; chosen from the config if None.

    Returns:
        Exit code: 0 when the run completed (even with failed entries).

    """
    try:
        config = load_run_config(config_path, overrides)
    except ConfigError as e:
        logger.error("Invalid configuration: {}", e)
        return EXIT_CONFIG

    output_dir = config.output_dir
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        sink = add_run_log(output_dir / "run.log", json_logs=json_logs)
    except OSError as e:
        logger.error("Invalid configuration: output_dir: cannot use {}: {}", output_dir, e)
        return EXIT_CONFIG
    try:
        if clock is None:
            clock = FakeClock() if config.uses_simulated_clock() else SystemClock()
        try:
            router = Router.from_specs(config.route, config.backends, clock)
        except RouteConfigError as e:
            logger.error("Invalid configuration: route.{}: {}", e.key, e)
            return EXIT_CONFIG

        try:
            entries = load_dataset(config.dataset.path, config.dataset.kind)
            if config.n_sample is not None:
                entries = sample(entries, config.n_sample, config.seeds.sample)
            report = evaluate(
                config.pipeline,
                entries,
                router,
                k=config.k_folds,
                seed=config.seeds.fold,
                dataset=config.dataset.display_name,
                settings=PipelineSettings(
                    max_iters=config.max_iters,
                    max_turns=config.max_turns,
                    refine_mode=config.refine_mode,
                    parallel_analyses=config.parallel_analyses,
                    shuffle_seed=config.shuffle_seed,
                ),
                workers=config.workers,
                clock=clock,
                transcript_dir=output_dir / "transcripts",
            )
        except DatasetError as e:
            logger.error("Dataset problem: {}", e)
            return EXIT_DATASET
        except TranscriptError as e:
            logger.error("Transcript problem: {}", e)
            return EXIT_TRANSCRIPT

        paths = write_reports([report], output_dir)
        snapshot = output_dir / "config.json"
        if Path(config_path).resolve() != snapshot.resolve():
            shutil.copyfile(config_path, snapshot)
        sys.stdout.write(paths["table"].read_text(encoding="utf-8"))
        logger.info("Run complete; artifacts in {}", output_dir)
        return EXIT_OK
    finally:
        logger.remove(sink)


def cmd_replay(path: Path) -> int:
    """Print a persisted transcript."""
    try:
        transcript = load_transcript(path)
    except TranscriptError as e:
        logger.error("{}", e)
        return EXIT_TRANSCRIPT
    sys.stdout.write(render_transcript(transcript))
    return EXIT_OK


def cmd_validate(path: Path, kind: DatasetKind) -> int:
    """Print a dataset summary; nonzero when any record is invalid or none exist."""
    try:
        scan = scan_dataset(path, kind)
    except DatasetError as e:
        logger.error("{}", e)
        return EXIT_DATASET

    lines = [f"{len(scan.entries)} entries"]
    if kind == "mcq":
        histogram = ", ".join(
            f"{n} options: {count}" for n, count in scan.option_histogram().items()
        )
        lines.append(f"option counts: {histogram or 'none'}")
    else:
        leaks = scan.leakage_errors()
        leaking = ", ".join(e.cause.record_id for e in leaks if e.cause is not None)
        lines.append(f"leakage: {leaking or 'none'}")
    lines.extend(f"invalid: {error}" for error in scan.errors)
    sys.stdout.write("\n".join(lines) + "\n")

    if scan.records == 0:
        logger.error("Dataset {} is empty", path)
        return EXIT_DATASET
    if scan.errors:
        logger.error("{} invalid record(s) in {}", len(scan.errors), path)
        return EXIT_DATASET
    return EXIT_OK


def cmd_convert(source: Path, destination: Path, fmt: str) -> int:
    """Convert an upstream dataset into the canonical MCQ JSONL format."""
    try:
        count = convert_dataset(source, destination, fmt)
    except DatasetError as e:
        logger.error("{}", e)
        return EXIT_DATASET
    sys.stdout.write(f"{count} entries written to {destination}\n")
    return EXIT_OK


def _create_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser.

    Returns:
        Configured ArgumentParser instance.

    """
    parser = argparse.ArgumentParser(
        prog="medagent-harness",
        description="Run medical multi-agent pipelines on benchmark datasets",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Evaluate a configured pipeline
  medagent-harness run configs/medagents-gpt4.json

  # Same run with another fold assignment and four workers
  medagent-harness run configs/medagents-gpt4.json --fold-seed 7 --workers 4

  # Read one entry's transcript
  medagent-harness replay runs/transcripts/medqa/medagents/medqa-0001.jsonl

  # Check a dataset before running it
  medagent-harness validate data/agentclinic.jsonl --kind clinical

  # Convert an upstream MedQA file
  medagent-harness convert medqa_test.jsonl data/medqa.jsonl --format medqa
        """,
    )
    parser.add_argument("--debug", "-d", action="store_true", help="Enable debug logging")
    parser.add_argument("--log-dir", help="Also keep a rotating log in this directory")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Evaluate a pipeline as configured")
    run.add_argument("config", type=Path, help="Run configuration (JSON)")
    run.add_argument("--sample-seed", type=int, help="Override seeds.sample")
    run.add_argument("--fold-seed", type=int, help="Override seeds.fold")
    run.add_argument("--workers", type=int, help="Entries evaluated concurrently")
    run.add_argument("--output-dir", type=Path, help="Directory for run artifacts")
    run.add_argument("--json-logs", action="store_true", help="Write run.log as JSON lines")

    replay = commands.add_parser("replay", help="Pretty-print a persisted transcript")
    replay.add_argument("transcript", type=Path)

    validate = commands.add_parser("validate", help="Check a dataset file")
    validate.add_argument("dataset", type=Path)
    validate.add_argument("--kind", choices=["mcq", "clinical"], required=True)

    convert = commands.add_parser("convert", help="Convert an upstream dataset")
    convert.add_argument("source", type=Path)
    convert.add_argument("destination", type=Path)
    convert.add_argument("--format", choices=sorted(CONVERTERS), required=True)

    return parser


def main(argv: Sequence[str] | None = None) -> None:
    """Run the CLI application.

    Args:
        argv: Command line arguments (default: sys.argv[1:]).

    """
    parser = _create_parser()
    args = parser.parse_args(argv)
    setup_logging(LogConfig(level="DEBUG" if args.debug else "INFO", log_dir=args.log_dir))

    if args.command == "run":
        code = cmd_run(
            args.config,
            RunOverrides(
                sample_seed=args.sample_seed,
                fold_seed=args.fold_seed,
                workers=args.workers,
                output_dir=args.output_dir,
            ),
            json_logs=args.json_logs,
        )
    elif args.command == "replay":
        code = cmd_replay(args.transcript)
    elif args.command == "validate":
        code = cmd_validate(args.dataset, args.kind)
    else:
        code = cmd_convert(args.source, args.destination, args.format)
    sys.exit(code)


if __name__ == "__main__":
    main()
