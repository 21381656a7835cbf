"""Benchmark harness: datasets, sampling, folds, scoring, tables and transcripts."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import tempfile
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal, NamedTuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .agentclinic import DEFAULT_MAX_TURNS, run_encounter
from .backend import BackendError, EntrySession, Router, SystemClock
from .cod import diagnose
from .domain import (
    ClinicalCase,
    DiagnosisLeakageError,
    DomainError,
    McqItem,
    PipelineError,
    Transcript,
    TranscriptEvent,
    Verdict,
    validate_case,
    validate_mcq,
)
from .medagents import DEFAULT_MAX_ITERS, MedAgentsSettings, RefineMode, run_medagents

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping, Sequence

    from .backend import Clock

DatasetKind = Literal["mcq", "clinical"]
PipelineName = Literal["cod", "medagents", "agentclinic"]
Entry = McqItem | ClinicalCase

PIPELINE_KINDS: dict[str, DatasetKind] = {
    "cod": "clinical",
    "medagents": "mcq",
    "agentclinic": "clinical",
}
STD_CONVENTION = "sample"
CSV_COLUMNS = (
    "pipeline",
    "route",
    "dataset",
    "n_entries",
    "n_failed",
    "fold_accuracies",
    "mean_accuracy",
    "std_accuracy",
    "overall_accuracy",
    "mean_runtime_seconds",
    "std_convention",
)

_UNSAFE_FILENAME = re.compile(r"[^A-Za-z0-9._-]")
_ACCURACY_CELL = re.compile(r"^\s*(?P<mean>-?\d+(?:\.\d+)?)\s*±\s*(?P<std>\d+(?:\.\d+)?)\s*$")


class DatasetError(Exception):
    """A dataset cannot be used for a run."""


class ParseError(DatasetError):
    """A record (or transcript line) is malformed or invalid."""

    def __init__(
        self,
        message: str,
        *,
        record: int | None = None,
        line: int | None = None,
        cause: DomainError | None = None,
    ) -> None:
        """Attach the 1-based record index, file line and validation error, when known."""
        self.record = record
        self.line = line
        self.cause = cause
        where = []
        if record is not None:
            where.append(f"record {record}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class EmptyDatasetError(DatasetError):
    """The dataset holds no records."""


class SampleTooLargeError(DatasetError):
    """More entries requested than the dataset holds."""


class TooFewEntriesError(DatasetError):
    """Fewer entries than folds."""


class TranscriptError(Exception):
    """A transcript file could not be written or read."""


# --------------------------------------------------------------------------- datasets


class _DuplicateKeys(list):
    """JSON object whose keys repeat, kept as ``[key, value]`` pairs."""


def _object_pairs(pairs: list[tuple[str, Any]]) -> dict[str, Any] | _DuplicateKeys:
    keys = [key for key, _ in pairs]
    if len(set(keys)) != len(keys):
        return _DuplicateKeys([key, value] for key, value in pairs)
    return dict(pairs)


_VALIDATORS: dict[str, Callable[[Mapping[str, Any]], Entry]] = {
    "mcq": validate_mcq,
    "clinical": validate_case,
}


@dataclass
class DatasetScan:
    """Every record of a dataset file, valid or not."""

    path: Path
    kind: DatasetKind
    entries: list[Entry] = field(default_factory=list)
    errors: list[ParseError] = field(default_factory=list)
    records: int = 0

    def option_histogram(self) -> dict[int, int]:
        """Option count to number of MCQ items."""
        counts = Counter(len(e.options) for e in self.entries if isinstance(e, McqItem))
        return dict(sorted(counts.items()))

    def leakage_errors(self) -> list[ParseError]:
        """Errors caused by the diagnosis leaking into the patient profile."""
        return [e for e in self.errors if isinstance(e.cause, DiagnosisLeakageError)]


def scan_dataset(path: Path, kind: DatasetKind) -> DatasetScan:
    """Parse and validate every record of a JSONL dataset, collecting all errors.

    Raises:
        DatasetError: The file cannot be read as UTF-8 text.

    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        msg = f"cannot read dataset {path}: {e}"
        raise DatasetError(msg) from e

    validate = _VALIDATORS[kind]
    scan = DatasetScan(path=Path(path), kind=kind)
    seen: set[str] = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        scan.records += 1
        record = scan.records
        try:
            raw = json.loads(line, object_pairs_hook=_object_pairs)
        except json.JSONDecodeError as e:
            scan.errors.append(ParseError(f"invalid JSON: {e.msg}", record=record, line=line_no))
            continue
        if not isinstance(raw, dict):
            scan.errors.append(
                ParseError(
                    "record must be a JSON object with unique keys", record=record, line=line_no
                ),
            )
            continue
        try:
            entry = validate(raw)
        except DomainError as e:
            scan.errors.append(ParseError(str(e), record=record, line=line_no, cause=e))
            continue
        if entry.id in seen:
            scan.errors.append(
                ParseError(f"duplicate entry id {entry.id!r}", record=record, line=line_no)
            )
            continue
        seen.add(entry.id)
        scan.entries.append(entry)
    return scan


def load_dataset(path: Path, kind: DatasetKind) -> list[Entry]:
    """Load a validated dataset in file order.

    Raises:
        ParseError: The first malformed or invalid record.
        EmptyDatasetError: The file holds no records.

    """
    scan = scan_dataset(path, kind)
    if scan.errors:
        raise scan.errors[0]
    if not scan.entries:
        msg = f"dataset {path} is empty"
        raise EmptyDatasetError(msg)
    logger.info("Loaded {} {} entries from {}", len(scan.entries), kind, path)
    return scan.entries


def convert_medqa_record(raw: Mapping[str, Any], index: int) -> dict[str, Any]:
    """Canonical MCQ record from a MedQA-style record (``options`` + ``answer_idx``)."""
    options = dict(raw.get("options") or {})
    answer = raw.get("answer_idx")
    if not answer:
        answer = next((k for k, v in options.items() if v == raw.get("answer")), None)
    return {
        "id": str(raw.get("id") or f"medqa-{index:04d}"),
        "question": raw.get("question"),
        "options": options,
        "answer": answer,
    }


def convert_medmcqa_record(
    raw: Mapping[str, Any],
    index: int,
    *,
    cop_base: int = 1,
) -> dict[str, Any]:
    """Canonical MCQ record from a MedMCQA-style record (``opa``..``opd`` + ``cop``)."""
    letters = ("A", "B", "C", "D")
    options = {letter: raw.get(f"op{letter.lower()}") for letter in letters}
    cop = raw.get("cop")
    position = cop - cop_base if isinstance(cop, int) else -1
    answer = letters[position] if 0 <= position < len(letters) else None
    return {
        "id": str(raw.get("id") or f"medmcqa-{index:04d}"),
        "question": raw.get("question"),
        "options": options,
        "answer": answer,
    }


CONVERTERS: dict[str, Callable[[Mapping[str, Any], int], dict[str, Any]]] = {
    "medqa": convert_medqa_record,
    "medmcqa": convert_medmcqa_record,
}


def convert_dataset(source: Path, destination: Path, fmt: str) -> int:
    """Convert an upstream JSONL file into the canonical MCQ format.

    Returns:
        Number of records written.

    Raises:
        ParseError: A record is malformed or does not validate after conversion.
        DatasetError: The source cannot be read.

    """
    convert = CONVERTERS[fmt]
    try:
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        msg = f"cannot read {source}: {e}"
        raise DatasetError(msg) from e

    out: list[str] = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        record = len(out) + 1
        try:
            item = validate_mcq(convert(json.loads(line), record))
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", record=record, line=line_no) from e
        except DomainError as e:
            raise ParseError(str(e), record=record, line=line_no) from e
        out.append(json.dumps(item.model_dump(), ensure_ascii=False))
    if not out:
        msg = f"{source} holds no records"
        raise EmptyDatasetError(msg)
    _atomic_write(Path(destination), "\n".join(out) + "\n")
    logger.info("Converted {} {} records into {}", len(out), fmt, destination)
    return len(out)


# ------------------------------------------------------------------ sampling and folds


class FoldPlan(BaseModel):
    """Seeded partition of entry ids into balanced folds."""

    model_config = ConfigDict(frozen=True)

    seed: int
    folds: tuple[tuple[str, ...], ...] = Field(min_length=1)

    @model_validator(mode="after")
    def _partition(self) -> FoldPlan:
        ids = [entry_id for fold in self.folds for entry_id in fold]
        if len(ids) != len(set(ids)):
            msg = "folds must be disjoint"
            raise ValueError(msg)
        sizes = [len(fold) for fold in self.folds]
        if max(sizes) - min(sizes) > 1:
            msg = "fold sizes may differ by at most one"
            raise ValueError(msg)
        return self

    @property
    def sizes(self) -> list[int]:
        """Fold sizes in fold order."""
        return [len(fold) for fold in self.folds]


def sample(entries: Sequence[Entry], n: int, seed: int) -> list[Entry]:
    """Seeded uniform sample without replacement, returned in dataset order.

    Raises:
        SampleTooLargeError: ``n`` exceeds the number of entries.

    """
    if n < 1:
        msg = f"sample size must be positive, got {n}"
        raise ValueError(msg)
    if n > len(entries):
        msg = f"cannot sample {n} entries from {len(entries)}"
        raise SampleTooLargeError(msg)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(entries), size=n, replace=False))
    return [entries[int(i)] for i in chosen]


def split_folds(entries: Sequence[Entry], k: int, seed: int) -> FoldPlan:
    """Shuffle with ``seed`` and cut into ``k`` contiguous, balanced folds.

    Raises:
        TooFewEntriesError: Fewer entries than folds.

    """
    if k < 1:
        msg = f"k must be positive, got {k}"
        raise ValueError(msg)
    if len(entries) < k:
        msg = f"cannot split {len(entries)} entries into {k} folds"
        raise TooFewEntriesError(msg)
    order = np.random.default_rng(seed).permutation(len(entries))
    folds = tuple(
        tuple(entries[int(i)].id for i in chunk) for chunk in np.array_split(order, k)
    )
    return FoldPlan(seed=seed, folds=folds)


class Aggregate(NamedTuple):
    """Fold statistics."""

    mean: float
    std: float
    mean_runtime: float


def aggregate(fold_accuracies: Sequence[float], runtimes: Sequence[float]) -> Aggregate:
    """Mean and sample standard deviation of fold accuracies, plus mean entry runtime.

    The standard deviation divides by k - 1 and is 0 for a single fold.
    """
    if not fold_accuracies:
        msg = "at least one fold accuracy is required"
        raise ValueError(msg)
    values = np.asarray(fold_accuracies, dtype=float)
    if np.all(values == values[0]):
        mean, std = float(values[0]), 0.0
    else:
        mean, std = float(values.mean()), float(values.std(ddof=1))
    mean_runtime = float(np.mean(runtimes)) if len(runtimes) else 0.0
    return Aggregate(mean=mean, std=std, mean_runtime=mean_runtime)


# -------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class PipelineSettings:
    """Pipeline knobs carried from the run configuration."""

    max_iters: int = DEFAULT_MAX_ITERS
    max_turns: int = DEFAULT_MAX_TURNS
    refine_mode: RefineMode = "first"
    parallel_analyses: int = 1
    shuffle_seed: int | None = None


class EntryRecord(BaseModel):
    """Outcome of one entry."""

    model_config = ConfigDict(frozen=True)

    id: str
    verdict: Verdict
    runtime_seconds: float = Field(ge=0.0)
    failed: bool = False
    error: str | None = None
    call_count: int = Field(default=0, ge=0)
    transcript_path: str | None = None


class EvalReport(BaseModel):
    """Aggregated result of one pipeline over one dataset with one route config."""

    model_config = ConfigDict(frozen=True)

    pipeline: str
    route: str
    dataset: str
    fold_accuracies: tuple[float, ...]
    fold_sizes: tuple[int, ...]
    mean_accuracy: float = Field(ge=0.0, le=100.0)
    std_accuracy: float = Field(ge=0.0)
    overall_accuracy: float = Field(ge=0.0, le=100.0)
    mean_runtime_seconds: float = Field(ge=0.0)
    n_failed: int = Field(ge=0)
    consistent: bool
    std_convention: str = STD_CONVENTION
    entries: tuple[EntryRecord, ...]

    @property
    def n_entries(self) -> int:
        """Number of evaluated entries."""
        return len(self.entries)


def run_entry(
    pipeline: str,
    entry: Entry,
    session: EntrySession,
    settings: PipelineSettings,
) -> Verdict:
    """Run one entry through ``pipeline`` and return its verdict."""
    if pipeline == "cod" and isinstance(entry, ClinicalCase):
        return diagnose(entry, session, shuffle_seed=settings.shuffle_seed).verdict
    if pipeline == "medagents" and isinstance(entry, McqItem):
        return run_medagents(
            entry,
            session,
            MedAgentsSettings(
                max_iters=settings.max_iters,
                refine_mode=settings.refine_mode,
                parallel_analyses=settings.parallel_analyses,
            ),
        ).verdict
    if pipeline == "agentclinic" and isinstance(entry, ClinicalCase):
        return run_encounter(entry, session, settings.max_turns).verdict
    msg = f"pipeline {pipeline!r} cannot run a {type(entry).__name__}"
    raise TypeError(msg)


@dataclass
class _Evaluation:
    pipeline: str
    router: Router
    clock: Clock
    settings: PipelineSettings
    dataset: str
    transcript_dir: Path | None

    def run(self, entry: Entry) -> EntryRecord:
        # Runtime is measured on a per-entry fork of the clock.
        clock = self.clock.fork()
        session = EntrySession(entry.id, self.router, clock)
        start = clock.now()
        with logger.contextualize(entry=entry.id, pipeline=self.pipeline):
            try:
                verdict = run_entry(self.pipeline, entry, session, self.settings)
                error = None
            except (BackendError, PipelineError) as e:
                logger.warning("Entry {} failed: {}", entry.id, e)
                session.fail(e)
                verdict, error = Verdict.INCORRECT, str(e)
            runtime = max(clock.now() - start, 0.0)
            logger.info("Entry {}: {} in {:.2f}s", entry.id, verdict.value, runtime)

        path = None
        if self.transcript_dir is not None:
            path = persist_transcript(
                session.transcript(),
                self.transcript_dir,
                dataset=self.dataset,
                pipeline=self.pipeline,
            )
        return EntryRecord(
            id=entry.id,
            verdict=verdict,
            runtime_seconds=runtime,
            failed=error is not None,
            error=error,
            call_count=session.call_count,
            transcript_path=str(path) if path else None,
        )


def evaluate(  # noqa: PLR0913
    pipeline: str,
    entries: Sequence[Entry],
    router: Router,
    *,
    k: int,
    seed: int,
    dataset: str = "dataset",
    settings: PipelineSettings | None = None,
    workers: int = 1,
    clock: Clock | None = None,
    transcript_dir: Path | None = None,
) -> EvalReport:
    """Run every entry once, score folds and aggregate.

    Entry failures (backend errors, unusable stage output) count as INCORRECT and
    are flagged; they never abort the evaluation.

    Args:
        pipeline: ``cod``, ``medagents`` or ``agentclinic``.
        entries: Validated entries of the matching kind.
        router: Route configuration with its backends.
        k: Number of folds.
        seed: Fold seed.
        dataset: Dataset name for the report and transcript paths.
        settings: Pipeline knobs.
        workers: Entries run concurrently.
        clock: Clock for runtimes; each entry runs on its own fork of it.
        transcript_dir: Where to persist per-entry transcripts, if anywhere.

    Returns:
        The aggregated report.

    """
    if pipeline not in PIPELINE_KINDS:
        msg = f"unknown pipeline {pipeline!r}"
        raise ValueError(msg)
    plan = split_folds(entries, k, seed)
    job = _Evaluation(
        pipeline=pipeline,
        router=router,
        clock=clock or SystemClock(),
        settings=settings or PipelineSettings(),
        dataset=dataset,
        transcript_dir=transcript_dir,
    )
    logger.info(
        "Evaluating {} on {} ({} entries, {} folds, route {})",
        pipeline,
        dataset,
        len(entries),
        k,
        router.name,
    )
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job.run, entries))
    else:
        records = [job.run(entry) for entry in entries]

    by_id = {record.id: record for record in records}
    fold_accuracies = [
        100.0 * sum(by_id[i].verdict is Verdict.CORRECT for i in fold) / len(fold)
        for fold in plan.folds
    ]
    stats = aggregate(fold_accuracies, [r.runtime_seconds for r in records])
    overall = 100.0 * sum(r.verdict is Verdict.CORRECT for r in records) / len(records)
    consistent = True
    if len(set(plan.sizes)) == 1:
        consistent = bool(np.isclose(stats.mean, overall))
        if not consistent:
            logger.error("Mean fold accuracy {} differs from overall {}", stats.mean, overall)

    report = EvalReport(
        pipeline=pipeline,
        route=router.name,
        dataset=dataset,
        fold_accuracies=tuple(fold_accuracies),
        fold_sizes=tuple(plan.sizes),
        mean_accuracy=stats.mean,
        std_accuracy=stats.std,
        overall_accuracy=overall,
        mean_runtime_seconds=stats.mean_runtime,
        n_failed=sum(r.failed for r in records),
        consistent=consistent,
        entries=tuple(records),
    )
    logger.info(
        "{} / {} / {}: {} ({} failed)",
        pipeline,
        router.name,
        dataset,
        format_accuracy(report.mean_accuracy, report.std_accuracy),
        report.n_failed,
    )
    return report


# ---------------------------------------------------------------------------- tables


def format_accuracy(mean: float, std: float) -> str:
    """Render an accuracy cell, e.g. ``78.91 ± 6.92``."""
    return f"{mean:.2f} ± {std:.2f}"


def parse_accuracy(cell: str) -> tuple[float, float]:
    """Inverse of ``format_accuracy``."""
    match = _ACCURACY_CELL.match(cell)
    if match is None:
        msg = f"not an accuracy cell: {cell!r}"
        raise ValueError(msg)
    return float(match.group("mean")), float(match.group("std"))


def _text_table(reports: Sequence[EvalReport]) -> str:
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    routes = list(dict.fromkeys(r.route for r in reports))
    cells = {(r.route, r.dataset): r for r in reports}

    header = ["Backbone"]
    for dataset in datasets:
        header.extend([f"{dataset} Accuracy(%)", f"{dataset} Runtime(s)"])
    rows = [header]
    for route in routes:
        row = [route]
        for dataset in datasets:
            report = cells.get((route, dataset))
            if report is None:
                row.extend(["-", "-"])
            else:
                row.append(format_accuracy(report.mean_accuracy, report.std_accuracy))
                row.append(f"{report.mean_runtime_seconds:.2f}")
        rows.append(row)

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [
        " | ".join(c.ljust(w) for c, w in zip(row, widths, strict=True)).rstrip() for row in rows
    ]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _csv(reports: Sequence[EvalReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(
            [
                r.pipeline,
                r.route,
                r.dataset,
                r.n_entries,
                r.n_failed,
                ";".join(repr(a) for a in r.fold_accuracies),
                repr(r.mean_accuracy),
                repr(r.std_accuracy),
                repr(r.overall_accuracy),
                repr(r.mean_runtime_seconds),
                r.std_convention,
            ],
        )
    return buffer.getvalue()


def emit_table(reports: Sequence[EvalReport]) -> tuple[str, str]:
    """Render reports as a text table (route rows, dataset columns) and a CSV.

    Returns:
        ``(text_table, csv_text)``; the CSV keeps full float precision.

    """
    return _text_table(reports), _csv(reports)


# ------------------------------------------------------------------------ transcripts


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        Path(tmp).replace(path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _safe_filename(part: str) -> str:
    safe = _UNSAFE_FILENAME.sub("_", part)
    if safe == part and part not in {".", ".."}:
        return safe
    # Distinct raw names must not share a file.
    digest = hashlib.sha256(part.encode("utf-8")).hexdigest()[:8]
    return f"{safe}-{digest}"


def transcript_path(directory: Path, *, dataset: str, pipeline: str, entry_id: str) -> Path:
    """``<directory>/<dataset>/<pipeline>/<entry_id>.jsonl`` with filesystem-safe parts.

    Parts with unsafe characters have them replaced and get a short hash of the
    original appended, so ``a/b`` and ``a_b`` land in different files.
    """
    safe = [_safe_filename(part) for part in (dataset, pipeline, entry_id)]
    return Path(directory) / safe[0] / safe[1] / f"{safe[2]}.jsonl"


def persist_transcript(
    transcript: Transcript,
    directory: Path,
    *,
    dataset: str,
    pipeline: str,
) -> Path:
    """Write a transcript as JSONL, one event per line, replacing any previous file.

    Raises:
        TranscriptError: The file could not be written.

    """
    path = transcript_path(
        directory, dataset=dataset, pipeline=pipeline, entry_id=transcript.entry_id
    )
    lines = [
        json.dumps(event.model_dump(mode="json"), ensure_ascii=False) for event in transcript.events
    ]
    try:
        _atomic_write(path, "".join(f"{line}\n" for line in lines))
    except OSError as e:
        msg = f"cannot write transcript {path}: {e}"
        raise TranscriptError(msg) from e
    return path


def load_transcript(path: Path, *, entry_id: str | None = None) -> Transcript:
    """Read a persisted transcript; the entry id defaults to the file stem.

    Raises:
        TranscriptError: The file is unreadable, empty, or has an invalid line.

    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        msg = f"cannot read transcript {path}: {e}"
        raise TranscriptError(msg) from e

    events: list[TranscriptEvent] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            events.append(TranscriptEvent.model_validate_json(line))
        except ValidationError as e:
            msg = f"{path}, line {line_no}: invalid transcript event ({e.error_count()} errors)"
            raise TranscriptError(msg) from e
    if not events:
        msg = f"transcript {path} is empty"
        raise TranscriptError(msg)
    return Transcript(entry_id=entry_id or path.stem, events=tuple(events))


def write_reports(reports: Iterable[EvalReport], directory: Path) -> dict[str, Path]:
    """Write ``table.txt``, ``report.csv`` and ``report.json`` into ``directory``."""
    reports = list(reports)
    table, csv_text = emit_table(reports)
    payload = json.dumps([r.model_dump(mode="json") for r in reports], indent=2, ensure_ascii=False)
    paths = {
        "table": Path(directory) / "table.txt",
        "csv": Path(directory) / "report.csv",
        "json": Path(directory) / "report.json",
    }
    _atomic_write(paths["table"], table)
    _atomic_write(paths["csv"], csv_text)
    _atomic_write(paths["json"], payload + "\n")
    return paths
