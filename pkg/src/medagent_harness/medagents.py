"""Five-expert consultation pipeline for multiple-choice questions.

Stages run strictly in order: recruit five specialists, collect one analysis per
specialist, summarize them into a report, let the specialists vote on the report
(a dissenter revises it) until everyone agrees or the round cap is hit, then pick
an option from the agreed report.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import prompts
from .backend import ChatMessage, ChatRequest
from .cod import UnparseableChoiceError, parse_choice
from .domain import (
    ROLE_SYSTEM,
    PipelineError,
    Verdict,
    expert_role,
    fold_text,
    leading_yes_no,
)

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from .backend import EntrySession
    from .domain import McqItem

EXPERT_COUNT = 5
DEFAULT_MAX_ITERS = 3

GATHER_KEY = "medagents.gather"
ANALYZE_KEY = "medagents.analyze"
SUMMARIZE_KEY = "medagents.summarize"
CONSULT_KEY = "medagents.consult"
DECIDE_KEY = "medagents.decide"

RefineMode = Literal["first", "all"]
Vote = Literal["yes", "no"]

_BULLET = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.)]|#+)\s*")
_NAME_DESCRIPTION = re.compile(r"\s*(?::|\s[-–—]\s)\s*")
_EXPERT_SUFFIX = re.compile(r"\s+(?:expert|specialist)s?$", re.IGNORECASE)
_LIST_SEPARATOR = re.compile(r"[,;]")
_LIST_CONJUNCTION = re.compile(r"^(?:and|or)\s+", re.IGNORECASE)
_QUOTES = "\"'`*_ "
_MAX_NAME_WORDS = 6


class ExpertParseFailureError(PipelineError):
    """Could not recruit five distinct experts."""


class ExpertRole(BaseModel):
    """A recruited specialist."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    description: str = ""

    @property
    def key(self) -> str:
        """Case-folded name used for distinctness."""
        return fold_text(self.name)

    @property
    def label(self) -> str:
        """Display label, e.g. ``Pathology Expert``."""
        return f"{self.name} Expert"


class VoteRound(BaseModel):
    """One round of voting on the current report."""

    model_config = ConfigDict(frozen=True)

    round_index: int = Field(ge=1)
    votes: dict[str, Vote]
    refiners: tuple[str, ...] = ()
    unparseable: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _refiner_iff_dissent(self) -> VoteRound:
        dissent = any(vote == "no" for vote in self.votes.values())
        if dissent != bool(self.refiners):
            msg = "a round has refiners exactly when some expert voted no"
            raise ValueError(msg)
        return self

    @property
    def refiner(self) -> str | None:
        """The first expert who revised the report this round."""
        return self.refiners[0] if self.refiners else None

    @property
    def unanimous(self) -> bool:
        """Every expert voted yes."""
        return all(vote == "yes" for vote in self.votes.values())


class MedAgentsResult(BaseModel):
    """Everything the consultation produced for one item."""

    model_config = ConfigDict(frozen=True)

    experts: tuple[ExpertRole, ...]
    analyses: dict[str, str]
    report: str
    vote_history: tuple[VoteRound, ...]
    answer: str | None
    raw_decision: str
    verdict: Verdict
    call_count: int = Field(ge=0)


@dataclass(frozen=True)
class MedAgentsSettings:
    """Knobs of the consultation loop."""

    max_iters: int = DEFAULT_MAX_ITERS
    refine_mode: RefineMode = "first"
    parallel_analyses: int = 1


def _question_context(item: McqItem) -> dict[str, str]:
    return {"question": item.question, "options": item.options_text()}


def _expert_system(role: ExpertRole) -> str:
    return prompts.render(
        "medagents_expert_system", name=role.name, description=role.description
    )


def _parse_expert_line(chunk: str) -> ExpertRole | None:
    line = _BULLET.sub("", chunk).strip()
    if not line or line.endswith(":"):
        return None
    parts = _NAME_DESCRIPTION.split(line, maxsplit=1)
    name = _EXPERT_SUFFIX.sub("", parts[0].strip(_QUOTES)).strip(_QUOTES)
    if not name or len(name.split()) > _MAX_NAME_WORDS:
        return None
    description = parts[1].strip(_QUOTES + ".") if len(parts) > 1 else ""
    return ExpertRole(
        name=name,
        description=f"{description}." if description else f"Specialist in {name}.",
    )


def _distinct(roles: Iterable[ExpertRole | None]) -> list[ExpertRole]:
    experts: list[ExpertRole] = []
    seen: set[str] = set()
    for role in roles:
        if role is not None and role.key not in seen:
            seen.add(role.key)
            experts.append(role)
    return experts


def _list_items(line: str) -> list[str]:
    """Items of a comma/semicolon list, read after any leading ``Label:``."""
    body = _BULLET.sub("", line).strip()
    _, colon, rest = body.partition(":")
    if colon and _LIST_SEPARATOR.search(rest):
        body = rest
    if not _LIST_SEPARATOR.search(body):
        return []
    return [
        _LIST_CONJUNCTION.sub("", item.strip()).rstrip(".")
        for item in _LIST_SEPARATOR.split(body)
    ]


def parse_experts(text: str) -> list[ExpertRole]:
    """Distinct expert roles from a recruitment reply, in the order given.

    One role per line (``Name: description`` allowed) is read first. When that gives
    fewer than five roles, comma/semicolon lists on any line are read instead and the
    reading with more distinct roles wins.
    """
    lines = [line for line in text.splitlines() if line.strip()]
    by_line = _distinct(_parse_expert_line(line) for line in lines)
    if len(by_line) >= EXPERT_COUNT:
        return by_line
    by_list = _distinct(
        _parse_expert_line(item) for line in lines for item in _list_items(line)
    )
    return by_list if len(by_list) > len(by_line) else by_line


def gather_experts(item: McqItem, session: EntrySession) -> tuple[ExpertRole, ...]:
    """Recruit five distinct experts, re-prompting once when the reply falls short.

    Raises:
        ExpertParseFailureError: Fewer than five distinct roles after the re-prompt.

    """
    system = prompts.render("medagents_gather_system")
    user = prompts.render("medagents_gather", **_question_context(item))
    request = ChatRequest.single(user, system=system, turn_label="gather experts")
    reply = session.call(GATHER_KEY, "gather", request, stage="gather")
    experts = parse_experts(reply)

    if len(experts) < EXPERT_COUNT:
        logger.warning("Item {}: {} distinct experts, re-prompting", item.id, len(experts))
        retry = ChatRequest(
            system=system,
            messages=(
                ChatMessage(speaker="user", text=user),
                ChatMessage(speaker="assistant", text=reply),
                ChatMessage(
                    speaker="user",
                    text=prompts.render(
                        "medagents_gather_retry",
                        found=len(experts),
                        names=", ".join(e.name for e in experts),
                    ),
                ),
            ),
            turn_label="gather experts (retry)",
        )
        seen = {e.key for e in experts}
        for role in parse_experts(session.call(GATHER_KEY, "gather", retry, stage="gather")):
            if role.key not in seen:
                seen.add(role.key)
                experts.append(role)

    if len(experts) < EXPERT_COUNT:
        msg = f"item {item.id!r}: only {len(experts)} distinct experts after re-prompt"
        raise ExpertParseFailureError(msg)
    return tuple(experts[:EXPERT_COUNT])


def _analysis_request(role: ExpertRole, item: McqItem) -> ChatRequest:
    return ChatRequest.single(
        prompts.render("medagents_analyze", **_question_context(item)),
        system=_expert_system(role),
        turn_label=f"{role.name} analysis",
    )


def _non_empty(text: str, what: str, item: McqItem) -> str:
    if not text.strip():
        msg = f"item {item.id!r}: empty {what}"
        raise PipelineError(msg)
    return text


def propose_analysis(role: ExpertRole, item: McqItem, session: EntrySession) -> str:
    """One expert's independent analysis of the question and options."""
    request = _analysis_request(role, item)
    text = session.call(ANALYZE_KEY, expert_role(role.name), request, stage="analyze")
    return _non_empty(text, f"{role.name} analysis", item)


def analyze_all(
    experts: Sequence[ExpertRole],
    item: McqItem,
    session: EntrySession,
    *,
    width: int = 1,
) -> dict[str, str]:
    """Collect every expert's analysis, keyed by expert name in recruitment order.

    With ``width`` > 1 the calls run on a thread pool, each on its own fork of the
    session clock; replies and their latencies are still recorded in recruitment order.
    """
    if width <= 1:
        return {role.name: propose_analysis(role, item, session) for role in experts}

    requests = [_analysis_request(role, item) for role in experts]
    with ThreadPoolExecutor(max_workers=width) as pool:
        responses = list(
            pool.map(lambda req: session.request(ANALYZE_KEY, req, detached=True), requests)
        )
    analyses: dict[str, str] = {}
    for role, request, response in zip(experts, requests, responses, strict=True):
        text = session.commit(
            ANALYZE_KEY,
            expert_role(role.name),
            request,
            response,
            stage="analyze",
            detached=True,
        )
        analyses[role.name] = _non_empty(text, f"{role.name} analysis", item)
    return analyses


def summarize(analyses: Mapping[str, str], item: McqItem, session: EntrySession) -> str:
    """Aggregate the five analyses into one report."""
    if len(analyses) != EXPERT_COUNT:
        msg = f"summarize needs {EXPERT_COUNT} analyses, got {len(analyses)}"
        raise ValueError(msg)
    request = ChatRequest.single(
        prompts.render(
            "medagents_summarize",
            analyses=[{"name": name, "text": text} for name, text in analyses.items()],
            **_question_context(item),
        ),
        turn_label="summarize analyses",
    )
    report = session.call(SUMMARIZE_KEY, "summarize", request, stage="summarize")
    return _non_empty(report, "summary report", item)


def _vote(role: ExpertRole, report: str, item: McqItem, session: EntrySession, rnd: int) -> str:
    request = ChatRequest.single(
        prompts.render("medagents_vote", report=report, **_question_context(item)),
        system=_expert_system(role),
        turn_label=f"{role.name} vote, round {rnd}",
    )
    return session.call(CONSULT_KEY, expert_role(role.name), request, stage="vote")


def _refine(role: ExpertRole, report: str, item: McqItem, session: EntrySession, rnd: int) -> str:
    request = ChatRequest.single(
        prompts.render("medagents_refine", report=report, **_question_context(item)),
        system=_expert_system(role),
        turn_label=f"{role.name} refinement, round {rnd}",
    )
    revised = session.call(CONSULT_KEY, expert_role(role.name), request, stage="refine")
    if not revised.strip():
        logger.warning("Item {}: {} returned an empty revision, keeping report", item.id, role.name)
        return report
    return revised


def consult(  # noqa: PLR0913
    report: str,
    experts: Sequence[ExpertRole],
    item: McqItem,
    session: EntrySession,
    *,
    max_iters: int = DEFAULT_MAX_ITERS,
    refine_mode: RefineMode = "first",
) -> tuple[str, tuple[VoteRound, ...]]:
    """Vote on the report until all experts agree or ``max_iters`` rounds have run.

    A reply without a leading yes/no counts as "no". Dissenters revise the report
    after the votes of a round are in, including in the final round.

    Returns:
        The latest report and the vote history.

    """
    if max_iters < 1:
        msg = "max_iters must be at least 1"
        raise ValueError(msg)

    history: list[VoteRound] = []
    for rnd in range(1, max_iters + 1):
        votes: dict[str, Vote] = {}
        unparseable: list[str] = []
        for role in experts:
            parsed = leading_yes_no(_vote(role, report, item, session, rnd))
            if parsed is None:
                unparseable.append(role.name)
                session.note(
                    ROLE_SYSTEM, f"Vote from {role.label} unparseable; counted as no", stage="vote"
                )
            votes[role.name] = parsed or "no"

        dissenters = [role for role in experts if votes[role.name] == "no"]
        refiners = dissenters if refine_mode == "all" else dissenters[:1]
        for role in refiners:
            report = _refine(role, report, item, session, rnd)

        history.append(
            VoteRound(
                round_index=rnd,
                votes=votes,
                refiners=tuple(role.name for role in refiners),
                unparseable=tuple(unparseable),
            ),
        )
        logger.debug("Item {} round {}: {}", item.id, rnd, votes)
        if not dissenters:
            break
    return report, tuple(history)


def decide(item: McqItem, report: str, session: EntrySession) -> tuple[str | None, str]:
    """Pick an option from the agreed report.

    Returns:
        The parsed option letter (None when unparseable) and the raw reply.

    """
    request = ChatRequest.single(
        prompts.render("medagents_decide", report=report, **_question_context(item)),
        turn_label="decide",
    )
    raw = session.call(DECIDE_KEY, "decide", request, stage="decide")
    try:
        return parse_choice(raw, item.options), raw
    except UnparseableChoiceError as e:
        logger.warning("Item {}: {}", item.id, e)
        session.note(ROLE_SYSTEM, "Decision unparseable; scored INCORRECT", stage="decide")
        return None, raw


def run_medagents(
    item: McqItem,
    session: EntrySession,
    settings: MedAgentsSettings | None = None,
) -> MedAgentsResult:
    """Run all five stages on ``item``.

    Raises:
        ExpertParseFailureError: Recruitment failed.
        PipelineError: A stage produced an empty analysis or report.
        BackendError: A routed backend failed.

    """
    settings = settings or MedAgentsSettings()
    calls_before = session.call_count

    experts = gather_experts(item, session)
    analyses = analyze_all(experts, item, session, width=settings.parallel_analyses)
    report = summarize(analyses, item, session)
    report, history = consult(
        report,
        experts,
        item,
        session,
        max_iters=settings.max_iters,
        refine_mode=settings.refine_mode,
    )
    answer, raw = decide(item, report, session)

    return MedAgentsResult(
        experts=experts,
        analyses=analyses,
        report=report,
        vote_history=history,
        answer=answer,
        raw_decision=raw,
        verdict=Verdict.from_match(matched=answer == item.answer),
        call_count=session.call_count - calls_before,
    )
