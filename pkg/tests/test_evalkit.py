"""Tests for datasets, folds, scoring, tables and transcripts."""

from __future__ import annotations

import csv
import io
import json
from typing import TYPE_CHECKING

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from medagent_harness.backend import RouteConfig, Router, ScriptRule
from medagent_harness.domain import (
    DiagnosisLeakageError,
    DuplicateTestError,
    Transcript,
    TranscriptEvent,
    UnknownAnswerLetterError,
    Verdict,
    validate_mcq,
)
from medagent_harness.evalkit import (
    CSV_COLUMNS,
    EmptyDatasetError,
    ParseError,
    SampleTooLargeError,
    TooFewEntriesError,
    TranscriptError,
    aggregate,
    convert_dataset,
    convert_medmcqa_record,
    emit_table,
    evaluate,
    format_accuracy,
    load_dataset,
    load_transcript,
    parse_accuracy,
    persist_transcript,
    sample,
    scan_dataset,
    split_folds,
    transcript_path,
    write_reports,
)
from tests.conftest import EXPERTS_REPLY, case_records, mcq_records, write_jsonl

if TYPE_CHECKING:
    from collections.abc import Callable
    from pathlib import Path

    from medagent_harness.backend import FakeClock, ScriptedBackend
    from medagent_harness.evalkit import EvalReport

ITEMS = [validate_mcq(record) for record in mcq_records(60)]


def test_load_dataset(mcq_dataset: Path) -> None:
    """Test records load in file order."""
    entries = load_dataset(mcq_dataset, "mcq")
    assert [e.id for e in entries[:3]] == ["q000", "q001", "q002"]
    assert len(entries) == 30


def test_load_dataset_reports_invalid_record(tmp_path: Path) -> None:
    """Test the failing record's index, line and cause are reported."""
    records: list[dict | str] = list(mcq_records(10))
    records[6] = {**records[6], "answer": "E"}
    records.insert(2, "")
    path = write_jsonl(tmp_path / "bad.jsonl", records)

    with pytest.raises(ParseError) as excinfo:
        load_dataset(path, "mcq")
    assert excinfo.value.record == 7
    assert excinfo.value.line == 8
    assert isinstance(excinfo.value.cause, UnknownAnswerLetterError)
    assert str(excinfo.value).startswith("record 7, line 8:")


def test_scan_collects_every_error(tmp_path: Path) -> None:
    """Test malformed JSON, duplicate keys and duplicate ids are all reported."""
    good = case_records(3)
    path = write_jsonl(
        tmp_path / "cases.jsonl",
        [
            good[0],
            "{not json",
            '{"id": "c9", "id": "c10", "patient_profile": "p", "correct_diagnosis": "Gout"}',
            '{"id": "c11", "patient_profile": "Sore toe.", "correct_diagnosis": "Gout", '
            '"tests": {"Uric_Acid": "high", "uric acid": "normal"}}',
            {**good[1], "id": good[0]["id"]},
            {**good[2], "patient_profile": "Known Disease 2 Alpha, referred."},
        ],
    )
    scan = scan_dataset(path, "clinical")
    assert scan.records == 6
    assert [e.id for e in scan.entries] == ["case000"]
    assert [e.record for e in scan.errors] == [2, 3, 4, 5, 6]
    assert "invalid JSON" in str(scan.errors[0])
    assert "unique keys" in str(scan.errors[1])
    assert isinstance(scan.errors[2].cause, DuplicateTestError)
    assert "duplicate entry id" in str(scan.errors[3])
    assert isinstance(scan.errors[4].cause, DiagnosisLeakageError)
    assert [e.cause.record_id for e in scan.leakage_errors() if e.cause] == ["case002"]


def test_option_histogram(tmp_path: Path) -> None:
    """Test items are counted by number of options."""
    five = {
        "id": "five",
        "question": "Five options?",
        "options": {letter: letter.lower() for letter in "ABCDE"},
        "answer": "E",
    }
    path = write_jsonl(tmp_path / "mcq.jsonl", [*mcq_records(3), five])
    assert scan_dataset(path, "mcq").option_histogram() == {4: 3, 5: 1}


def test_empty_dataset(tmp_path: Path) -> None:
    """Test a file without records."""
    path = tmp_path / "empty.jsonl"
    path.write_text("\n\n", encoding="utf-8")
    with pytest.raises(EmptyDatasetError):
        load_dataset(path, "mcq")


def test_sample_is_seeded_and_ordered() -> None:
    """Test the same seed gives the same sample, in dataset order."""
    first = sample(ITEMS, 20, seed=3)
    assert first == sample(ITEMS, 20, seed=3)
    positions = [ITEMS.index(item) for item in first]
    assert positions == sorted(positions)
    assert len(set(positions)) == 20


def test_sample_too_large() -> None:
    """Test sampling more entries than exist."""
    with pytest.raises(SampleTooLargeError):
        sample(ITEMS[:5], 6, seed=0)


def test_split_folds_sizes() -> None:
    """Test ten entries in three folds."""
    plan = split_folds(ITEMS[:10], 3, seed=0)
    assert sorted(plan.sizes, reverse=True) == [4, 3, 3]
    assert plan == split_folds(ITEMS[:10], 3, seed=0)


def test_split_folds_too_few_entries() -> None:
    """Test more folds than entries."""
    with pytest.raises(TooFewEntriesError):
        split_folds(ITEMS[:2], 3, seed=0)


@given(
    n=st.integers(min_value=1, max_value=60),
    k=st.integers(min_value=1, max_value=10),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_split_folds_partitions(n: int, k: int, seed: int) -> None:
    """Test folds are disjoint, cover every entry and differ in size by at most one."""
    assume(k <= n)
    plan = split_folds(ITEMS[:n], k, seed)
    ids = [entry_id for fold in plan.folds for entry_id in fold]
    assert sorted(ids) == sorted(item.id for item in ITEMS[:n])
    assert len(plan.folds) == k
    assert max(plan.sizes) - min(plan.sizes) <= 1


def test_aggregate() -> None:
    """Test mean and sample standard deviation."""
    stats = aggregate([40.0, 50.0, 60.0], [1.0, 3.0])
    assert stats.mean == pytest.approx(50.0)
    assert stats.std == pytest.approx(10.0)
    assert stats.mean_runtime == pytest.approx(2.0)
    assert aggregate([70.0, 70.0, 70.0], []).std == 0.0
    assert aggregate([55.0], [0.5]).std == 0.0


def test_format_and_parse_accuracy() -> None:
    """Test the accuracy cell format."""
    assert format_accuracy(78.9123, 6.9187) == "78.91 ± 6.92"
    assert format_accuracy(100.0, 0.0) == "100.00 ± 0.00"
    assert parse_accuracy("78.91 ± 6.92") == (78.91, 6.92)
    with pytest.raises(ValueError, match="accuracy cell"):
        parse_accuracy("78.91")


def test_evaluate_oracle_backend(
    clinical_dataset: Path,
    scripted: Callable[..., ScriptedBackend],
    clock: FakeClock,
    tmp_path: Path,
) -> None:
    """Test an always-right backbone scores 100 with simulated runtimes."""
    entries = load_dataset(clinical_dataset, "clinical")
    backend = scripted(
        ScriptRule(reply="Answer: A", repeat=True), name="oracle", delay_seconds=2.0
    )
    report = evaluate(
        "cod",
        entries,
        Router.uniform(backend),
        k=3,
        seed=0,
        dataset="synthetic",
        clock=clock,
        transcript_dir=tmp_path / "transcripts",
    )
    assert report.fold_accuracies == (100.0, 100.0, 100.0)
    assert format_accuracy(report.mean_accuracy, report.std_accuracy) == "100.00 ± 0.00"
    assert report.mean_runtime_seconds == pytest.approx(2.0)
    assert report.n_failed == 0
    assert report.consistent
    assert report.route == "oracle"
    assert all(record.call_count == 1 for record in report.entries)
    assert (tmp_path / "transcripts" / "synthetic" / "cod" / "case000.jsonl").exists()


def test_evaluate_always_wrong(
    clinical_dataset: Path,
    scripted: Callable[..., ScriptedBackend],
    clock: FakeClock,
) -> None:
    """Test an always-wrong backbone scores zero."""
    entries = load_dataset(clinical_dataset, "clinical")
    backend = scripted(ScriptRule(reply="Answer: B", repeat=True))
    report = evaluate("cod", entries, Router.uniform(backend), k=3, seed=1, clock=clock)
    assert format_accuracy(report.mean_accuracy, report.std_accuracy) == "0.00 ± 0.00"
    assert report.overall_accuracy == 0.0


def _wrong_letter(letter: str) -> str:
    return "ABCD"[("ABCD".index(letter) + 1) % 4]


def _medagents_router(scripted: Callable[..., ScriptedBackend], *, right: bool) -> Router:
    """Experts always agree; the decider answers each question by its number."""
    decisions = [
        ScriptRule(
            match=record["question"],
            reply=f"Answer: {record['answer'] if right else _wrong_letter(record['answer'])}",
            repeat=True,
        )
        for record in mcq_records(30)
    ]
    backends = {
        "recruiter": scripted(ScriptRule(reply=EXPERTS_REPLY, repeat=True), name="recruiter"),
        "analyst": scripted(
            ScriptRule(reply="The findings narrow the options.", repeat=True), name="analyst"
        ),
        "writer": scripted(
            ScriptRule(reply="Report: the experts converge on one option.", repeat=True),
            name="writer",
        ),
        "voter": scripted(ScriptRule(reply="yes", repeat=True), name="voter"),
        "decider": scripted(*decisions, name="decider"),
    }
    config = RouteConfig(
        name="medagents-script",
        default_backend="recruiter",
        overrides={
            "medagents.analyze": "analyst",
            "medagents.summarize": "writer",
            "medagents.consult": "voter",
            "medagents.decide": "decider",
        },
    )
    return Router(config, backends)


def _clinic_router(scripted: Callable[..., ScriptedBackend], *, right: bool) -> Router:
    """Each patient names its case; the doctor diagnoses from that name."""
    suffix = "Alpha" if right else "Beta"
    patient = scripted(
        *[
            ScriptRule(match=f"symptom pattern {i}.", reply=f"My ticket is [case {i}].")
            for i in range(30)
        ],
        name="patient",
    )
    doctor = scripted(
        *[
            ScriptRule(match=f"[case {i}]", reply=f"DIAGNOSIS READY: Disease {i} {suffix}")
            for i in range(30)
        ],
        ScriptRule(reply="What brings you in today?", repeat=True),
        name="doctor",
    )
    moderator = scripted(ScriptRule(reply="No", repeat=True), name="moderator")
    config = RouteConfig(
        name="clinic-script",
        default_backend="doctor",
        overrides={"agentclinic.patient": "patient", "agentclinic.moderator": "moderator"},
    )
    return Router(config, {"doctor": doctor, "patient": patient, "moderator": moderator})


@pytest.mark.parametrize(("right", "expected"), [(True, "100.00 ± 0.00"), (False, "0.00 ± 0.00")])
def test_evaluate_medagents_scripted_extremes(
    mcq_dataset: Path,
    scripted: Callable[..., ScriptedBackend],
    clock: FakeClock,
    *,
    right: bool,
    expected: str,
) -> None:
    """Test always-right and always-wrong deciders over thirty questions."""
    entries = load_dataset(mcq_dataset, "mcq")
    report = evaluate(
        "medagents", entries, _medagents_router(scripted, right=right), k=3, seed=0, clock=clock
    )
    assert report.n_entries == 30
    assert format_accuracy(report.mean_accuracy, report.std_accuracy) == expected
    assert report.n_failed == 0
    assert all(record.call_count == 13 for record in report.entries)


@pytest.mark.parametrize(("right", "expected"), [(True, "100.00 ± 0.00"), (False, "0.00 ± 0.00")])
def test_evaluate_agentclinic_scripted_extremes(
    tmp_path: Path,
    scripted: Callable[..., ScriptedBackend],
    clock: FakeClock,
    *,
    right: bool,
    expected: str,
) -> None:
    """Test always-right and always-wrong doctors over thirty cases."""
    entries = load_dataset(write_jsonl(tmp_path / "cases.jsonl", case_records(30)), "clinical")
    report = evaluate(
        "agentclinic", entries, _clinic_router(scripted, right=right), k=3, seed=0, clock=clock
    )
    assert report.n_entries == 30
    assert format_accuracy(report.mean_accuracy, report.std_accuracy) == expected
    assert report.n_failed == 0
    # doctor, patient, doctor, plus the moderator when the names differ
    assert all(record.call_count == (3 if right else 4) for record in report.entries)


def test_evaluate_counts_failures_as_incorrect(
    clinical_dataset: Path,
    scripted: Callable[..., ScriptedBackend],
    clock: FakeClock,
    tmp_path: Path,
) -> None:
    """Test backend failures are flagged, scored INCORRECT and never abort the run."""
    entries = load_dataset(clinical_dataset, "clinical")
    backend = scripted(
        ScriptRule(match="Disease 0 Alpha", fail="transport", repeat=True),
        ScriptRule(reply="Answer: A", repeat=True),
        retry_limit=1,
    )
    report = evaluate(
        "cod",
        entries,
        Router.uniform(backend),
        k=3,
        seed=0,
        clock=clock,
        transcript_dir=tmp_path,
    )
    failed = [record for record in report.entries if record.failed]
    assert [record.id for record in failed] == ["case000"]
    assert failed[0].verdict is Verdict.INCORRECT
    assert "scripted transport failure" in (failed[0].error or "")
    assert report.n_failed == 1
    assert report.overall_accuracy == pytest.approx(100.0 * 11 / 12)

    transcript = load_transcript(tmp_path / "dataset" / "cod" / "case000.jsonl")
    assert transcript.events[-1].stage == "error"


def test_evaluate_with_workers_matches_serial(
    clinical_dataset: Path,
    scripted: Callable[..., ScriptedBackend],
    clock: FakeClock,
) -> None:
    """Test concurrent entries with simulated latency give byte-identical reports."""
    entries = load_dataset(clinical_dataset, "clinical")

    def run(workers: int) -> tuple[EvalReport, str]:
        backend = scripted(
            ScriptRule(reply="Answer: A", repeat=True), name="oracle", delay_seconds=2.0
        )
        report = evaluate(
            "cod", entries, Router.uniform(backend), k=3, seed=5, clock=clock, workers=workers
        )
        return report, emit_table([report])[1]

    serial, serial_csv = run(1)
    for _ in range(3):
        threaded, threaded_csv = run(4)
        assert threaded_csv == serial_csv
        assert [r.runtime_seconds for r in threaded.entries] == [2.0] * len(entries)
    assert serial.mean_runtime_seconds == 2.0
    assert [r.id for r in threaded.entries] == [r.id for r in serial.entries]


def test_emit_table(
    clinical_dataset: Path,
    scripted: Callable[..., ScriptedBackend],
    clock: FakeClock,
) -> None:
    """Test the text table and the full-precision CSV."""
    entries = load_dataset(clinical_dataset, "clinical")
    backend = scripted(ScriptRule(reply="Answer: A", repeat=True), name="gpt-4")
    report = evaluate(
        "cod", entries, Router.uniform(backend), k=3, seed=0, dataset="DxBench", clock=clock
    )
    text, csv_text = emit_table([report])

    lines = text.splitlines()
    assert lines[0].split(" | ") == ["Backbone", "DxBench Accuracy(%)", "DxBench Runtime(s)"]
    assert set(lines[1]) <= {"-", "+"}
    assert [cell.strip() for cell in lines[2].split("|")] == ["gpt-4", "100.00 ± 0.00", "0.00"]

    rows = list(csv.DictReader(io.StringIO(csv_text)))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[0]["mean_accuracy"] == "100.0"
    assert rows[0]["std_convention"] == "sample"
    assert rows[0]["n_entries"] == "12"


def test_write_reports(
    clinical_dataset: Path,
    scripted: Callable[..., ScriptedBackend],
    clock: FakeClock,
    tmp_path: Path,
) -> None:
    """Test the three report artifacts."""
    entries = load_dataset(clinical_dataset, "clinical")
    report = evaluate(
        "cod",
        entries,
        Router.uniform(scripted(ScriptRule(reply="Answer: A", repeat=True))),
        k=3,
        seed=0,
        clock=clock,
    )
    paths = write_reports([report], tmp_path / "out")
    assert sorted(p.name for p in paths.values()) == ["report.csv", "report.json", "table.txt"]
    payload = json.loads(paths["json"].read_text(encoding="utf-8"))
    assert payload[0]["fold_sizes"] == [4, 4, 4]
    assert len(payload[0]["entries"]) == 12


def test_transcript_roundtrip_keeps_newlines(tmp_path: Path) -> None:
    """Test multi-line text survives as one JSON line per event."""
    transcript = Transcript(
        entry_id="knee-01",
        events=(
            TranscriptEvent(role="doctor", text="Line one\nLine two", backend_name="gpt"),
            TranscriptEvent(role="measurement", text="RESULTS: NORMAL READINGS", stage="m"),
            TranscriptEvent(role="system", text="The diagnosis was CORRECT"),
        ),
    )
    path = persist_transcript(transcript, tmp_path, dataset="agentclinic", pipeline="agentclinic")
    assert len(path.read_text(encoding="utf-8").splitlines()) == 3
    assert load_transcript(path) == transcript


def test_load_transcript_errors(tmp_path: Path) -> None:
    """Test empty and invalid transcript files."""
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(TranscriptError, match="empty"):
        load_transcript(empty)

    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"role": "doctor"}\n', encoding="utf-8")
    with pytest.raises(TranscriptError, match="line 1"):
        load_transcript(broken)

    with pytest.raises(TranscriptError):
        load_transcript(tmp_path / "missing.jsonl")


def test_transcript_path_is_filesystem_safe(tmp_path: Path) -> None:
    """Test ids with separators stay inside the transcript directory."""
    path = transcript_path(tmp_path, dataset="MedQA", pipeline="medagents", entry_id="a/b c")
    assert path.parent == tmp_path / "MedQA" / "medagents"
    assert path.name.startswith("a_b_c-")
    escaped = transcript_path(tmp_path, dataset="..", pipeline="cod", entry_id="x")
    assert escaped.resolve().is_relative_to(tmp_path.resolve())


def test_transcript_paths_do_not_collide(tmp_path: Path) -> None:
    """Test ids that only differ in unsafe characters keep separate transcripts."""
    ids = ["a/b", "a b", "a_b", "a?b"]
    paths = {
        transcript_path(tmp_path, dataset="MedQA", pipeline="cod", entry_id=entry_id)
        for entry_id in ids
    }
    assert len(paths) == len(ids)
    assert tmp_path / "MedQA" / "cod" / "a_b.jsonl" in paths

    for entry_id in ids:
        persist_transcript(
            Transcript(entry_id=entry_id, events=(TranscriptEvent(role="doctor", text=entry_id),)),
            tmp_path,
            dataset="MedQA",
            pipeline="cod",
        )
    assert len(list((tmp_path / "MedQA" / "cod").glob("*.jsonl"))) == len(ids)


def test_convert_medmcqa(tmp_path: Path) -> None:
    """Test MedMCQA records map ``cop`` 1..4 onto A..D."""
    record = {
        "id": "m1",
        "question": "Drug of choice?",
        "opa": "w",
        "opb": "x",
        "opc": "y",
        "opd": "z",
        "cop": 3,
    }
    assert convert_medmcqa_record(record, 1)["answer"] == "C"
    assert convert_medmcqa_record({**record, "cop": 2}, 1, cop_base=0)["answer"] == "C"

    source = write_jsonl(tmp_path / "medmcqa.jsonl", [record])
    dest = tmp_path / "out" / "mcq.jsonl"
    assert convert_dataset(source, dest, "medmcqa") == 1
    assert load_dataset(dest, "mcq")[0].answer == "C"


def test_convert_medqa(tmp_path: Path) -> None:
    """Test MedQA records keep options and take ``answer_idx``."""
    record = {
        "question": "Most likely organism?",
        "options": {"A": "Blastomyces", "B": "Histoplasma"},
        "answer": "Histoplasma",
        "answer_idx": "B",
    }
    source = write_jsonl(tmp_path / "medqa.jsonl", [record, {**record, "answer_idx": None}])
    dest = tmp_path / "mcq.jsonl"
    assert convert_dataset(source, dest, "medqa") == 2
    entries = load_dataset(dest, "mcq")
    assert [e.id for e in entries] == ["medqa-0001", "medqa-0002"]
    assert {e.answer for e in entries} == {"B"}
