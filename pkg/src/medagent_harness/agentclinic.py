"""Simulated clinical encounter between doctor, patient, measurement and moderator agents.

The doctor questions the patient, may order tests with ``REQUEST TEST: <name>``, and
ends the encounter with ``DIAGNOSIS READY: <diagnosis>``. The moderator then compares
the declared diagnosis with the case's gold label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import prompts
from .backend import BackendError, ChatRequest
from .domain import (
    ROLE_DOCTOR,
    ROLE_MEASUREMENT,
    ROLE_MODERATOR,
    ROLE_PATIENT,
    ROLE_SYSTEM,
    Transcript,
    Verdict,
    leading_yes_no,
    normalize_diagnosis,
    normalize_test_name,
)

if TYPE_CHECKING:
    from .backend import EntrySession
    from .domain import ClinicalCase

DEFAULT_MAX_TURNS = 20

DOCTOR_KEY = "agentclinic.doctor"
PATIENT_KEY = "agentclinic.patient"
MEASUREMENT_KEY = "agentclinic.measurement"
MODERATOR_KEY = "agentclinic.moderator"

TEST_REQUEST_TOKEN = "REQUEST TEST:"  # noqa: S105
DIAGNOSIS_READY_TOKEN = "DIAGNOSIS READY:"
RESULTS_PREFIX = "RESULTS: "
NORMAL_READINGS = "RESULTS: NORMAL READINGS"

_SPEAKER_LABELS = {
    ROLE_DOCTOR: "Doctor",
    ROLE_PATIENT: "Patient",
    ROLE_MEASUREMENT: "Measurement",
}


class Marker(BaseModel):
    """Control token found in a doctor utterance."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["none", "test_request", "diagnosis_ready"] = "none"
    payload: str = ""

    @model_validator(mode="after")
    def _payload_matches_kind(self) -> Marker:
        if (self.kind == "none") == bool(self.payload):
            msg = "markers carry a non-empty payload, plain utterances none"
            raise ValueError(msg)
        return self


NO_MARKER = Marker()


def _payload_after(utterance: str, token: str) -> str | None:
    index = utterance.find(token)
    if index < 0:
        return None
    rest = utterance[index + len(token) :]
    lines = rest.splitlines() or [""]
    payload = lines[0].strip()
    if not payload:
        # Token alone on its line: the payload is the next non-empty line.
        payload = next((line.strip() for line in lines[1:] if line.strip()), "")
    return payload or None


def detect_marker(utterance: str) -> Marker:
    """Find a test request or diagnosis declaration in a doctor utterance.

    Tokens are case-sensitive; the first occurrence counts and the payload is the
    rest of its line, trimmed. A diagnosis declaration wins over a test request.
    """
    diagnosis = _payload_after(utterance, DIAGNOSIS_READY_TOKEN)
    if diagnosis is not None:
        return Marker(kind="diagnosis_ready", payload=diagnosis)
    test = _payload_after(utterance, TEST_REQUEST_TOKEN)
    if test is not None:
        return Marker(kind="test_request", payload=test)
    return NO_MARKER


@dataclass
class EncounterState:
    """Mutable state of one running encounter."""

    case: ClinicalCase
    session: EntrySession
    max_turns: int = DEFAULT_MAX_TURNS
    turn_index: int = 0
    dialogue: list[tuple[str, str]] = field(default_factory=list)
    pending_test: str | None = None
    finished: bool = False
    declared_diagnosis: str | None = None

    def add(self, role: str, text: str) -> None:
        """Append an utterance to the dialogue."""
        self.dialogue.append((role, text))

    def render(self, *, include_measurements: bool = True, skip_last: bool = False) -> str:
        """Dialogue as ``Speaker: text`` lines."""
        lines = self.dialogue[:-1] if skip_last else self.dialogue
        return "\n".join(
            f"{_SPEAKER_LABELS[role]}: {text}"
            for role, text in lines
            if include_measurements or role != ROLE_MEASUREMENT
        )

    def finish(self, diagnosis: str | None) -> None:
        """Close the encounter with ``diagnosis`` (None when nothing usable was declared)."""
        self.declared_diagnosis = diagnosis
        self.finished = diagnosis is not None


class EncounterResult(BaseModel):
    """Outcome of one encounter."""

    model_config = ConfigDict(frozen=True)

    declared_diagnosis: str | None
    verdict: Verdict
    turns_used: int = Field(ge=0)
    transcript: Transcript
    call_counts: dict[str, int]


def _doctor_request(state: EncounterState, *, final: bool) -> ChatRequest:
    system = prompts.render(
        "agentclinic_doctor_system",
        max_turns=state.max_turns,
        turns_used=state.turn_index,
    )
    if final:
        user = prompts.render("agentclinic_doctor_final", dialogue=state.render())
        label = "forced diagnosis"
    else:
        user = prompts.render("agentclinic_doctor", dialogue=state.render())
        label = f"doctor turn {state.turn_index + 1}"
    return ChatRequest.single(user, system=system, turn_label=label)


def doctor_turn(state: EncounterState, *, final: bool = False) -> str:
    """One doctor utterance; ``final`` asks for the diagnosis once the budget is spent.

    Raises:
        BackendError: The doctor backend failed; the encounter aborts.

    """
    request = _doctor_request(state, final=final)
    stage = "forced-diagnosis" if final else "doctor"
    utterance = state.session.call(DOCTOR_KEY, ROLE_DOCTOR, request, stage=stage)
    if not final:
        state.turn_index += 1
    state.add(ROLE_DOCTOR, utterance)
    return utterance


def patient_turn(state: EncounterState) -> str:
    """The patient's answer to the doctor's latest utterance.

    The patient sees its own profile and the doctor/patient exchange only; test
    results and the gold diagnosis stay out of its prompt.
    """
    question = state.dialogue[-1][1] if state.dialogue else ""
    request = ChatRequest.single(
        prompts.render(
            "agentclinic_patient",
            dialogue=state.render(include_measurements=False, skip_last=True),
            question=question,
        ),
        system=prompts.render("agentclinic_patient_system", profile=state.case.patient_profile),
        turn_label=f"patient turn {state.turn_index}",
    )
    utterance = state.session.call(PATIENT_KEY, ROLE_PATIENT, request, stage="patient")
    state.add(ROLE_PATIENT, utterance)
    return utterance


def lookup_test(test_name: str, case: ClinicalCase) -> str | None:
    """Stored result for ``test_name`` under normalized key comparison."""
    wanted = normalize_test_name(test_name)
    for name, result in case.tests.items():
        if normalize_test_name(name) == wanted:
            return result
    return None


def measurement_turn(test_name: str, case: ClinicalCase, session: EntrySession) -> str:
    """Answer a test request.

    Recorded results are returned directly. Other tests go to the measurement
    backbone, and fall back to normal readings if that call fails.
    """
    stored = lookup_test(test_name, case)
    if stored is not None:
        reply = RESULTS_PREFIX + stored
        session.note(ROLE_MEASUREMENT, reply, stage="measurement", backend_name="case-record")
        return reply

    request = ChatRequest.single(
        prompts.render("agentclinic_measurement", test=test_name),
        system=prompts.render("agentclinic_measurement_system", tests=list(case.tests.items())),
        turn_label=f"measurement {test_name}",
    )
    try:
        response = session.request(MEASUREMENT_KEY, request)
    except BackendError as e:
        logger.warning("Case {}: measurement failed ({}), reporting normal readings", case.id, e)
        session.note(
            ROLE_MEASUREMENT, NORMAL_READINGS, stage="measurement", backend_name="fallback"
        )
        return NORMAL_READINGS

    text = response.text.strip()
    if not text.startswith("RESULTS:"):
        text = RESULTS_PREFIX + text if text else NORMAL_READINGS
    return session.commit(
        MEASUREMENT_KEY,
        ROLE_MEASUREMENT,
        request,
        response.model_copy(update={"text": text}),
        stage="measurement",
    )


def moderate(declared: str, gold: str, session: EntrySession) -> Verdict:
    """Judge a declared diagnosis against the gold label.

    An exact match after normalization needs no backbone call. Otherwise the
    moderator is asked whether both name the same disease; anything but a leading
    "yes" (including a failed call) is INCORRECT.
    """
    if normalize_diagnosis(declared) == normalize_diagnosis(gold):
        return Verdict.CORRECT

    request = ChatRequest.single(
        prompts.render("agentclinic_moderator", gold=gold, declared=declared),
        turn_label="moderation",
    )
    try:
        reply = session.call(MODERATOR_KEY, ROLE_MODERATOR, request, stage="moderator")
    except BackendError as e:
        logger.warning("Moderator unavailable ({}), scoring INCORRECT", e)
        session.note(ROLE_SYSTEM, "Moderator unavailable; scored INCORRECT", stage="moderator")
        return Verdict.INCORRECT

    vote = leading_yes_no(reply)
    if vote is None:
        logger.warning("Moderator reply unparseable: {!r}", reply)
        session.note(
            ROLE_SYSTEM, "Moderator reply unparseable; scored INCORRECT", stage="moderator"
        )
    return Verdict.from_match(matched=vote == "yes")


def run_encounter(
    case: ClinicalCase,
    session: EntrySession,
    max_turns: int = DEFAULT_MAX_TURNS,
) -> EncounterResult:
    """Run the doctor/patient/measurement loop and moderate the outcome.

    Raises:
        ValueError: ``max_turns`` is below 1.
        BackendError: The doctor or patient backend failed.

    """
    if max_turns < 1:
        msg = "max_turns must be at least 1"
        raise ValueError(msg)

    state = EncounterState(case=case, session=session, max_turns=max_turns)
    while state.turn_index < max_turns:
        marker = detect_marker(doctor_turn(state))
        if marker.kind == "diagnosis_ready":
            state.finish(marker.payload)
            break
        if marker.kind == "test_request":
            state.pending_test = marker.payload
            state.add(ROLE_MEASUREMENT, measurement_turn(marker.payload, case, session))
            state.pending_test = None
            continue
        patient_turn(state)
    else:
        logger.info("Case {}: turn budget of {} spent, forcing a diagnosis", case.id, max_turns)
        utterance = doctor_turn(state, final=True)
        marker = detect_marker(utterance)
        payload = marker.payload if marker.kind == "diagnosis_ready" else utterance.strip()
        state.finish(payload or None)

    if state.declared_diagnosis is None:
        session.note(ROLE_SYSTEM, "No diagnosis declared; scored INCORRECT", stage="moderator")
        verdict = Verdict.INCORRECT
    else:
        verdict = moderate(state.declared_diagnosis, case.correct_diagnosis, session)
    session.note(ROLE_SYSTEM, f"The diagnosis was {verdict.value}")

    return EncounterResult(
        declared_diagnosis=state.declared_diagnosis,
        verdict=verdict,
        turns_used=state.turn_index,
        transcript=session.transcript(),
        call_counts={
            role: session.call_counts[key]
            for role, key in (
                (ROLE_DOCTOR, DOCTOR_KEY),
                (ROLE_PATIENT, PATIENT_KEY),
                (ROLE_MEASUREMENT, MEASUREMENT_KEY),
                (ROLE_MODERATOR, MODERATOR_KEY),
            )
        },
    )
