"""Shared fixtures: simulated clock, scripted backends and dataset files."""

from __future__ import annotations

import json
import os
from typing import TYPE_CHECKING, Any

import pytest
from hypothesis import settings
from loguru import logger

from medagent_harness.backend import (
    EntrySession,
    FakeClock,
    Router,
    ScriptedBackend,
    ScriptRule,
)
from medagent_harness.domain import validate_case, validate_mcq

if TYPE_CHECKING:
    from collections.abc import Callable, Generator, Iterable
    from pathlib import Path

    from medagent_harness.domain import ClinicalCase, McqItem

settings.register_profile("default", max_examples=100, deadline=None)
settings.register_profile("fast", max_examples=20, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


KNEE_CASE: dict[str, Any] = {
    "id": "knee-01",
    "patient_profile": (
        "45-year-old woman, recreational runner. Pain on the inner side of the left knee "
        "below the joint line for three weeks, worse on stairs and when rising from a chair. "
        "Tenderness over the medial proximal tibia. No trauma, no locking or giving way."
    ),
    "explicit_symptoms": "Medial knee pain below the joint line, worse on stairs.",
    "candidates": [
        {"name": "Pes Anserine Bursitis", "description": "Inflamed bursa at the medial tibia."},
        {"name": "Patellar Tendinopathy", "description": "Overuse injury of the patellar tendon."},
        {"name": "Medial Meniscus Tear", "description": "Torn cartilage with locking."},
    ],
    "tests": {"Physical_Examination": "Tenderness over the pes anserine insertion."},
    "correct_diagnosis": "Pes Anserine Bursitis",
}

RUBELLA_CASE: dict[str, Any] = {
    "id": "infant-07",
    "patient_profile": (
        "Parent of a 3-week-old boy with poor feeding, a heart murmur and cloudy eyes. "
        "The mother had a rash and fever early in pregnancy and was never vaccinated."
    ),
    "candidates": ["Congenital Rubella Syndrome", "Congenital CMV Infection"],
    "tests": {
        "Echocardiogram": "Patent ductus arteriosus",
        "Rubella IgM Serology": "Positive",
    },
    "correct_diagnosis": "Congenital Rubella Syndrome",
}

HISTOPLASMA_ITEM: dict[str, Any] = {
    "id": "medqa-0001",
    "question": (
        "A 45-year-old man who explores caves presents with fever, cough and hilar "
        "lymphadenopathy. Biopsy shows small oval yeast inside macrophages. Which is the "
        "most likely causative organism?"
    ),
    "options": {
        "A": "Blastomyces dermatitidis",
        "B": "Coccidioides immitis",
        "C": "Cryptococcus neoformans",
        "D": "Histoplasma capsulatum",
    },
    "answer": "D",
}

EXPERTS_REPLY = """\
1. Infectious Diseases: diagnosis and treatment of fungal and bacterial infections
2. Pulmonology: diseases of the lungs and airways
3. Pathology: tissue diagnosis and microscopy
4. Radiology: imaging of the chest
5. Microbiology: identification of pathogens"""


@pytest.fixture
def clock() -> FakeClock:
    """Simulated clock shared by the backends of a test."""
    return FakeClock()


@pytest.fixture
def scripted(clock: FakeClock) -> Callable[..., ScriptedBackend]:
    """Factory for scripted backends bound to the test clock."""

    def _make(
        *replies: str | ScriptRule,
        name: str = "scripted",
        **spec_fields: Any,
    ) -> ScriptedBackend:
        return ScriptedBackend.from_replies(name, replies, clock=clock, **spec_fields)

    return _make


@pytest.fixture
def session_for() -> Callable[..., EntrySession]:
    """Factory for an entry session over one backend or a router."""

    def _make(target: ScriptedBackend | Router, entry_id: str = "entry") -> EntrySession:
        router = target if isinstance(target, Router) else Router.uniform(target)
        return EntrySession(entry_id, router)

    return _make


@pytest.fixture
def knee_case() -> ClinicalCase:
    """Knee-pain case with three candidates and one recorded test."""
    return validate_case(KNEE_CASE)


@pytest.fixture
def rubella_case() -> ClinicalCase:
    """Neonatal case whose tests are all recorded."""
    return validate_case(RUBELLA_CASE)


@pytest.fixture
def histoplasma_item() -> McqItem:
    """Four-option MCQ whose answer is D."""
    return validate_mcq(HISTOPLASMA_ITEM)


def write_jsonl(path: Path, records: Iterable[dict[str, Any] | str]) -> Path:
    """Write records (dicts or raw lines) as JSONL."""
    lines = [r if isinstance(r, str) else json.dumps(r) for r in records]
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return path


def mcq_records(count: int) -> list[dict[str, Any]]:
    """``count`` distinct four-option items; the answer cycles through A..D."""
    return [
        {
            "id": f"q{i:03d}",
            "question": f"Question number {i}?",
            "options": {"A": f"alpha {i}", "B": f"beta {i}", "C": f"gamma {i}", "D": f"delta {i}"},
            "answer": "ABCD"[i % 4],
        }
        for i in range(count)
    ]


def case_records(count: int) -> list[dict[str, Any]]:
    """``count`` distinct cases; the first candidate is always the gold diagnosis."""
    return [
        {
            "id": f"case{i:03d}",
            "patient_profile": f"Patient {i} reports symptom pattern {i}.",
            "candidates": [f"Disease {i} Alpha", f"Disease {i} Beta", f"Disease {i} Gamma"],
            "tests": {"Blood_Panel": f"panel {i}"},
            "correct_diagnosis": f"Disease {i} Alpha",
        }
        for i in range(count)
    ]


@pytest.fixture
def mcq_dataset(tmp_path: Path) -> Path:
    """Thirty valid MCQ records on disk."""
    return write_jsonl(tmp_path / "mcq.jsonl", mcq_records(30))


@pytest.fixture
def clinical_dataset(tmp_path: Path) -> Path:
    """Twelve valid clinical cases on disk."""
    return write_jsonl(tmp_path / "cases.jsonl", case_records(12))


@pytest.fixture
def captured_logs() -> Generator[list[str], None, None]:
    """Collect formatted log messages emitted during the test."""
    messages: list[str] = []
    sink = logger.add(messages.append, level="DEBUG", format="{level} {message}")
    yield messages
    logger.remove(sink)
