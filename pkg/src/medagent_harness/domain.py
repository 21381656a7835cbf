"""Core data types shared by every pipeline and the benchmark harness.

Records parsed from dataset files go through ``validate_mcq`` / ``validate_case``,
which raise a named ``DomainError`` subclass for the first invariant a record breaks.
Validated models are frozen and safe to share between worker threads.
"""

from __future__ import annotations

import re
from collections.abc import Mapping, Sequence
from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

OPTION_LETTERS: tuple[str, ...] = ("A", "B", "C", "D", "E")
MIN_OPTIONS = 2
_PAIR = 2

OptionId = Literal["A", "B", "C", "D", "E"]

ROLE_DOCTOR = "doctor"
ROLE_PATIENT = "patient"
ROLE_MEASUREMENT = "measurement"
ROLE_MODERATOR = "moderator"
ROLE_SYSTEM = "system"

_WHITESPACE = re.compile(r"\s+")
_PUNCTUATION = re.compile(r"[^\w\s]|_")
_TEST_NAME_SEPARATORS = re.compile(r"[\W_]+")
_EXPERT_ROLE = re.compile(r"^expert\((?P<name>.+)\)$")
_LEADING_YES_NO = re.compile(r"^[\W_]*(?P<word>yes|no)\b", re.IGNORECASE)


class Verdict(str, Enum):
    """Binary outcome of one benchmark entry."""

    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"

    @classmethod
    def from_match(cls, *, matched: bool) -> Verdict:
        """Return CORRECT when ``matched`` is true, INCORRECT otherwise."""
        return cls.CORRECT if matched else cls.INCORRECT


class DomainError(ValueError):
    """A raw record violates a domain invariant."""

    def __init__(self, record_id: str, field: str, detail: str) -> None:
        """Store the offending record id and field alongside the message."""
        self.record_id = record_id
        self.field = field
        super().__init__(f"record {record_id!r}, field {field!r}: {detail}")


class MissingFieldError(DomainError):
    """A required field is absent or empty."""


class DuplicateTestError(MissingFieldError):
    """Two test names in one case normalize to the same key."""


class DuplicateCandidateError(DomainError):
    """Two candidate diseases in one pool share a name."""


class UnknownAnswerLetterError(DomainError):
    """The gold answer letter is not one of the item's options."""


class NonContiguousOptionsError(DomainError):
    """Option letters do not run contiguously from A."""


class DiagnosisLeakageError(DomainError):
    """The patient profile spells out the gold diagnosis."""


class PipelineError(RuntimeError):
    """A pipeline stage could not produce a usable result; the entry fails."""


def fold_text(text: str) -> str:
    """Trim, case-fold and collapse internal whitespace."""
    return _WHITESPACE.sub(" ", text).strip().casefold()


def strip_punctuation(text: str) -> str:
    """Replace punctuation with spaces; pair with ``fold_text``."""
    return _PUNCTUATION.sub(" ", text)


def normalize_diagnosis(text: str) -> str:
    """Comparison key for diagnoses: punctuation-free, folded."""
    return fold_text(strip_punctuation(text))


def normalize_test_name(name: str) -> str:
    """Lookup key for test names: case-folded, ``_``/``-``/spaces/markup collapsed."""
    return _TEST_NAME_SEPARATORS.sub(" ", name).strip().casefold()


def leading_yes_no(text: str) -> Literal["yes", "no"] | None:
    """Return the leading yes/no token of a reply, ignoring case and quoting."""
    match = _LEADING_YES_NO.match(text)
    if match is None:
        return None
    return "yes" if match.group("word").lower() == "yes" else "no"


def expert_role(name: str) -> str:
    """Transcript role label for an expert."""
    return f"expert({name})"


def expert_name(role: str) -> str | None:
    """Inverse of ``expert_role``; None for non-expert roles."""
    match = _EXPERT_ROLE.match(role)
    return match.group("name") if match else None


class McqItem(BaseModel):
    """A multiple-choice clinical question."""

    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    question: str = Field(min_length=1)
    options: dict[str, str]
    answer: OptionId

    def options_text(self) -> str:
        """Render options one per line as ``A: text``."""
        return "\n".join(f"{letter}: {text}" for letter, text in self.options.items())


class DiseaseCandidate(BaseModel):
    """One disease of a case's candidate pool."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    description: str = ""


class ClinicalCase(BaseModel):
    """Patient facts, candidate pool, recorded test results and gold diagnosis."""

    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    patient_profile: str = Field(min_length=1)
    explicit_symptoms: str = ""
    candidates: tuple[DiseaseCandidate, ...] = ()
    tests: dict[str, str] = Field(default_factory=dict)
    correct_diagnosis: str = Field(min_length=1)


class TranscriptEvent(BaseModel):
    """One produced utterance or note within an entry's transcript."""

    model_config = ConfigDict(frozen=True)

    role: str = Field(min_length=1)
    text: str
    backend_name: str = ""
    latency_seconds: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    stage: str | None = None


class Transcript(BaseModel):
    """Ordered record of everything that happened while running one entry."""

    model_config = ConfigDict(frozen=True)

    entry_id: str
    events: tuple[TranscriptEvent, ...] = ()

    def roles(self) -> list[str]:
        """Return event roles in order."""
        return [event.role for event in self.events]

    def stages(self) -> list[str]:
        """Return the stage labels of events that carry one, in order."""
        return [event.stage for event in self.events if event.stage is not None]

    @property
    def total_latency(self) -> float:
        """Sum of per-event backbone latency."""
        return sum(event.latency_seconds for event in self.events)


def _record_id(raw: Mapping[str, Any]) -> str:
    value = raw.get("id")
    return str(value).strip() if value not in (None, "") else "<unknown>"


def _required_text(raw: Mapping[str, Any], record_id: str, field: str) -> str:
    value = raw.get(field)
    if not isinstance(value, str) or not value.strip():
        raise MissingFieldError(record_id, field, "required text is missing or empty")
    return value.strip()


def _pairs(value: Any) -> list[tuple[str, Any]] | None:
    """Accept a mapping or a sequence of ``[key, value]`` pairs.

    The dataset loader hands over objects with repeated keys as pair lists so that
    duplicates stay visible here.
    """
    if isinstance(value, Mapping):
        return [(str(key), item) for key, item in value.items()]
    if isinstance(value, Sequence) and not isinstance(value, str):
        pairs: list[tuple[str, Any]] = []
        for item in value:
            if isinstance(item, Mapping) and "name" in item:
                pairs.append((str(item["name"]), item.get("result", item.get("description", ""))))
            elif isinstance(item, Sequence) and not isinstance(item, str) and len(item) == _PAIR:
                pairs.append((str(item[0]), item[1]))
            else:
                return None
        return pairs
    return None


def validate_mcq(raw: Mapping[str, Any]) -> McqItem:
    """Validate a raw MCQ record.

    Raises:
        MissingFieldError: A required field is absent, empty or malformed.
        NonContiguousOptionsError: Option letters are not ``A..`` without gaps.
        UnknownAnswerLetterError: The answer is not an option key.

    """
    record_id = _record_id(raw)
    _required_text(raw, record_id, "id")
    question = _required_text(raw, record_id, "question")
    if raw.get("options") in (None, "", {}, []):
        raise MissingFieldError(record_id, "options", "required options are missing")
    pairs = _pairs(raw["options"])
    if pairs is None:
        raise MissingFieldError(record_id, "options", "options must be a letter-to-text mapping")

    options: dict[str, str] = {}
    for key, text in pairs:
        letter = key.strip()
        if letter in options:
            raise NonContiguousOptionsError(record_id, "options", f"letter {letter} repeated")
        if letter not in OPTION_LETTERS:
            raise NonContiguousOptionsError(record_id, "options", f"unexpected letter {letter!r}")
        if not isinstance(text, str) or not text.strip():
            raise MissingFieldError(record_id, f"options.{letter}", "option text is empty")
        options[letter] = text.strip()

    letters = sorted(options)
    if len(letters) < MIN_OPTIONS or letters != list(OPTION_LETTERS[: len(letters)]):
        raise NonContiguousOptionsError(
            record_id,
            "options",
            f"letters {''.join(letters)} must run contiguously from A "
            f"(at least {MIN_OPTIONS})",
        )

    answer = raw.get("answer")
    if not isinstance(answer, str) or not answer.strip():
        raise MissingFieldError(record_id, "answer", "required answer letter is missing")
    if answer.strip() not in options:
        raise UnknownAnswerLetterError(record_id, "answer", f"{answer.strip()!r} is not an option")

    return McqItem(
        id=record_id,
        question=question,
        options={letter: options[letter] for letter in letters},
        answer=answer.strip(),
    )


def _validate_candidates(raw: Mapping[str, Any], record_id: str) -> tuple[DiseaseCandidate, ...]:
    value = raw.get("candidates") or []
    if isinstance(value, Mapping) or isinstance(value, str) or not isinstance(value, Sequence):
        raise MissingFieldError(record_id, "candidates", "candidates must be a list")
    candidates: list[DiseaseCandidate] = []
    seen: set[str] = set()
    for index, item in enumerate(value):
        if isinstance(item, str):
            name, description = item, ""
        elif isinstance(item, Mapping):
            name, description = item.get("name"), item.get("description") or ""
        else:
            name, description = None, ""
        if not isinstance(name, str) or not name.strip():
            raise MissingFieldError(record_id, f"candidates[{index}].name", "name is empty")
        key = fold_text(name)
        if key in seen:
            raise DuplicateCandidateError(
                record_id, f"candidates[{index}].name", f"{name.strip()!r} repeated"
            )
        seen.add(key)
        candidates.append(DiseaseCandidate(name=name.strip(), description=str(description).strip()))
    return tuple(candidates)


def _validate_tests(raw: Mapping[str, Any], record_id: str) -> dict[str, str]:
    value = raw.get("tests")
    if value in (None, "", {}, []):
        return {}
    pairs = _pairs(value)
    if pairs is None:
        raise MissingFieldError(record_id, "tests", "tests must map test names to results")
    tests: dict[str, str] = {}
    seen: set[str] = set()
    for name, result in pairs:
        key = normalize_test_name(name)
        if not key:
            raise MissingFieldError(record_id, "tests", "test name is empty")
        if key in seen:
            raise DuplicateTestError(record_id, f"tests.{name.strip()}", "test name repeated")
        seen.add(key)
        tests[name.strip()] = str(result).strip()
    return tests


def validate_case(raw: Mapping[str, Any]) -> ClinicalCase:
    """Validate a raw clinical case record, including the leakage check.

    Raises:
        MissingFieldError: A required field is absent, empty or malformed.
        DuplicateTestError: Two tests share a (normalized) name.
        DuplicateCandidateError: Two candidates share a name.
        DiagnosisLeakageError: The profile contains the gold diagnosis.

    """
    record_id = _record_id(raw)
    _required_text(raw, record_id, "id")
    profile = _required_text(raw, record_id, "patient_profile")
    diagnosis = _required_text(raw, record_id, "correct_diagnosis")
    symptoms = raw.get("explicit_symptoms") or ""
    if not isinstance(symptoms, str):
        raise MissingFieldError(record_id, "explicit_symptoms", "symptoms must be text")

    if fold_text(diagnosis) in fold_text(profile):
        raise DiagnosisLeakageError(
            record_id, "patient_profile", "profile contains the gold diagnosis"
        )

    return ClinicalCase(
        id=record_id,
        patient_profile=profile,
        explicit_symptoms=symptoms.strip(),
        candidates=_validate_candidates(raw, record_id),
        tests=_validate_tests(raw, record_id),
        correct_diagnosis=diagnosis,
    )
