"""Single-call diagnosis over a full candidate pool.

The model sees the patient's symptoms and every candidate disease with its
description as a lettered list, ranks them, and answers with the best letter.
"""

from __future__ import annotations

import random
import re
import string
from itertools import product
from typing import TYPE_CHECKING

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from . import prompts
from .backend import ChatRequest
from .domain import ROLE_SYSTEM, PipelineError, Verdict, fold_text

if TYPE_CHECKING:
    from collections.abc import Mapping

    from .backend import EntrySession
    from .domain import ClinicalCase, DiseaseCandidate

ROUTE_KEY = "cod.rank"
STAGE = "rank"

# Cued letters such as "Answer: D", "option (C)", "choice is B".
_CUED = (
    r"\s*(?:(?i:is)\s*)?[:\-]?\s*"
    r"[\(\[]?\**(?P<letter>[A-Z]{1,2})\**[\)\]]?(?![A-Za-z0-9])"
)
_ANSWER_CUE = re.compile(r"\b(?i:answer)" + _CUED)
_OPTION_CUE = re.compile(r"\b(?i:option|choice)" + _CUED)
_LETTER_TOKEN = re.compile(
    r"(?<![A-Za-z0-9'])(?P<open>[\(\[])?(?P<letter>[A-Z]{1,2})(?![A-Za-z0-9'])",
)
_WORD_AFTER = re.compile(r"\s+[a-z0-9]")
# Uppercase words that are also ordinary English.
_WORD_LETTERS = frozenset({"A", "I"})
# Words that cannot follow the article or pronoun, so the capital is an option.
_ANSWER_AFTER = re.compile(
    r"\s+(?:is|because|since|seems|appears|fits|matches|best|remains)\b", re.IGNORECASE
)


class EmptyCandidatePoolError(PipelineError):
    """The case has no candidate diseases to rank."""


class UnparseableChoiceError(ValueError):
    """No option could be extracted from a reply."""

    def __init__(self, text: str) -> None:
        """Keep the raw reply."""
        self.text = text
        preview = text if len(text) <= 80 else f"{text[:77]}..."  # noqa: PLR2004
        super().__init__(f"no option found in reply {preview!r}")


class CodResult(BaseModel):
    """Outcome of one ranked diagnosis."""

    model_config = ConfigDict(frozen=True)

    chosen: str | None
    letter: str | None
    raw_response: str
    verdict: Verdict
    latency_seconds: float = Field(default=0.0, ge=0.0)
    call_count: int = Field(default=0, ge=0)


def option_letters(count: int) -> list[str]:
    """Letters for ``count`` options: A..Z, then AA, AB, ..."""
    letters = list(string.ascii_uppercase)
    letters.extend("".join(pair) for pair in product(string.ascii_uppercase, repeat=2))
    return letters[:count]


def candidate_options(
    case: ClinicalCase,
    *,
    shuffle_seed: int | None = None,
) -> dict[str, DiseaseCandidate]:
    """Assign letters to the candidate pool, in dataset order unless a shuffle seed is given."""
    candidates = list(case.candidates)
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(candidates)  # noqa: S311
    return dict(zip(option_letters(len(candidates)), candidates, strict=True))


def build_ranking_prompt(case: ClinicalCase, *, shuffle_seed: int | None = None) -> ChatRequest:
    """Build the ranking request for ``case``.

    Args:
        case: The clinical case.
        shuffle_seed: Permute candidate order with this seed (position-bias runs).

    Returns:
        A single-message request listing symptoms and lettered candidates.

    Raises:
        EmptyCandidatePoolError: The case has no candidates.

    """
    options = candidate_options(case, shuffle_seed=shuffle_seed)
    if not options:
        msg = f"case {case.id!r} has no candidate diseases"
        raise EmptyCandidatePoolError(msg)
    text = prompts.render(
        "cod_rank",
        symptoms=case.explicit_symptoms or case.patient_profile,
        options=[
            {"letter": letter, "name": c.name, "description": c.description or "no description"}
            for letter, c in options.items()
        ],
    )
    return ChatRequest.single(text, turn_label=f"{case.id} ranking")


def _reads_as_word(text: str, match: re.Match[str]) -> bool:
    """True for a capital ``A``/``I`` that starts an ordinary sentence."""
    if match.group("letter") not in _WORD_LETTERS or match.group("open"):
        return False
    if _ANSWER_AFTER.match(text, match.end()):
        return False
    return _WORD_AFTER.match(text, match.end()) is not None


def parse_choice(text: str, options: Mapping[str, str]) -> str:
    """Extract the chosen option letter from a model reply.

    Precedence: a letter cued by "answer" ("Answer: D"), then one cued by "option"
    or "choice" ("option (C)"), then the first standalone letter token naming an
    option ("(C)", "B.", "A is"), then the longest option name found in the reply
    (case-insensitive). A capital ``A``/``I`` that reads as an ordinary word counts
    only when nothing else identifies an option.

    Args:
        text: The reply.
        options: Letter to option text (or candidate name), in order.

    Returns:
        The selected letter.

    Raises:
        UnparseableChoiceError: Nothing in the reply identifies an option.

    """
    for cue in (_ANSWER_CUE, _OPTION_CUE):
        for match in cue.finditer(text):
            if match.group("letter") in options:
                return match.group("letter")

    word_letters: list[str] = []
    for match in _LETTER_TOKEN.finditer(text):
        letter = match.group("letter")
        if letter not in options:
            continue
        if not _reads_as_word(text, match):
            return letter
        word_letters.append(letter)

    folded = fold_text(text)
    best: tuple[int, str] | None = None
    for letter, name in options.items():
        key = fold_text(name)
        if key and key in folded and (best is None or len(key) > best[0]):
            best = (len(key), letter)
    if best is not None:
        return best[1]
    if word_letters:
        return word_letters[0]
    raise UnparseableChoiceError(text)


def diagnose(
    case: ClinicalCase,
    session: EntrySession,
    *,
    shuffle_seed: int | None = None,
) -> CodResult:
    """Rank the candidate pool of ``case`` with one backbone call and pick the top disease.

    A single-candidate pool is answered without calling the backbone. An
    unparseable reply yields an INCORRECT result that keeps the raw text.

    Raises:
        EmptyCandidatePoolError: The case has no candidates.
        BackendError: The routed backend failed.

    """
    options = candidate_options(case, shuffle_seed=shuffle_seed)
    if not options:
        msg = f"case {case.id!r} has no candidate diseases"
        raise EmptyCandidatePoolError(msg)

    if len(options) == 1:
        only = next(iter(options.values()))
        session.note(ROLE_SYSTEM, f"Single candidate {only.name!r} chosen without ranking")
        return CodResult(
            chosen=only.name,
            letter="A",
            raw_response="",
            verdict=Verdict.from_match(
                matched=fold_text(only.name) == fold_text(case.correct_diagnosis),
            ),
        )

    request = build_ranking_prompt(case, shuffle_seed=shuffle_seed)
    response = session.request(ROUTE_KEY, request)
    session.commit(ROUTE_KEY, STAGE, request, response, stage=STAGE)

    try:
        letter = parse_choice(response.text, {k: c.name for k, c in options.items()})
    except UnparseableChoiceError as e:
        logger.warning("Case {}: {}", case.id, e)
        session.note(ROLE_SYSTEM, "Ranking reply unparseable; scored INCORRECT", stage="parse")
        return CodResult(
            chosen=None,
            letter=None,
            raw_response=response.text,
            verdict=Verdict.INCORRECT,
            latency_seconds=response.latency_seconds,
            call_count=1,
        )

    chosen = options[letter].name
    return CodResult(
        chosen=chosen,
        letter=letter,
        raw_response=response.text,
        verdict=Verdict.from_match(matched=fold_text(chosen) == fold_text(case.correct_diagnosis)),
        latency_seconds=response.latency_seconds,
        call_count=1,
    )
