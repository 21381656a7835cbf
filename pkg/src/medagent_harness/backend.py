"""Chat-completion backends, stage routing and per-entry call recording.

Every pipeline stage reaches a language model through ``EntrySession.call`` with a
route key such as ``medagents.consult``. The session resolves the key through a
``Router`` to a ``ChatBackend`` and records the exchange in the entry's transcript.
"""

from __future__ import annotations

import json
import os
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal, Protocol

import backoff
import httpx
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .domain import ROLE_SYSTEM, Transcript, TranscriptEvent

if TYPE_CHECKING:
    from collections.abc import Generator, Iterable, Mapping

ROUTE_KEYS: frozenset[str] = frozenset(
    {
        "cod.rank",
        "medagents.gather",
        "medagents.analyze",
        "medagents.summarize",
        "medagents.consult",
        "medagents.decide",
        "agentclinic.doctor",
        "agentclinic.patient",
        "agentclinic.measurement",
        "agentclinic.moderator",
    },
)

DEFAULT_TIMEOUT_SECONDS = 60.0
DEFAULT_RETRY_LIMIT = 2
DEFAULT_BACKOFF_SECONDS = 1.0


class BackendError(Exception):
    """A backbone call failed; carries the backend name and the calling stage."""

    def __init__(self, backend_name: str, stage: str | None, detail: str) -> None:
        """Build the message from backend, stage and detail."""
        self.backend_name = backend_name
        self.stage = stage
        self.detail = detail
        where = f" during {stage}" if stage else ""
        super().__init__(f"backend {backend_name!r}{where}: {detail}")


class BackendTimeoutError(BackendError):
    """The backend did not answer within its timeout."""


class TransportError(BackendError):
    """Network failure, non-2xx status or malformed response body."""


class MissingCredentialError(BackendError):
    """The credential environment variable is unset or empty."""


class ScriptExhaustedError(BackendError):
    """A scripted backend has no rule left for the request."""


class RouteConfigError(ValueError):
    """A route configuration is unusable."""

    def __init__(self, message: str, *, key: str | None = None) -> None:
        """Remember the offending route key, if any."""
        self.key = key
        super().__init__(message)


class UnknownRouteKeyError(RouteConfigError):
    """A route key outside the recognized set."""


class ChatMessage(BaseModel):
    """One turn of a chat request."""

    model_config = ConfigDict(frozen=True)

    speaker: Literal["user", "assistant"]
    text: str


class ChatRequest(BaseModel):
    """A system prompt plus one or more alternating messages."""

    model_config = ConfigDict(frozen=True)

    system: str | None = None
    messages: tuple[ChatMessage, ...] = Field(min_length=1)
    turn_label: str | None = None

    @classmethod
    def single(
        cls,
        text: str,
        *,
        system: str | None = None,
        turn_label: str | None = None,
    ) -> ChatRequest:
        """Build a request holding one user message."""
        return cls(
            system=system,
            messages=(ChatMessage(speaker="user", text=text),),
            turn_label=turn_label,
        )

    def full_text(self) -> str:
        """Concatenate the system prompt and every message, in order."""
        parts = [self.system] if self.system else []
        parts.extend(message.text for message in self.messages)
        return "\n".join(parts)

    def to_wire(self) -> list[dict[str, str]]:
        """Chat-completions style message list."""
        wire = [{"role": "system", "content": self.system}] if self.system else []
        wire.extend({"role": m.speaker, "content": m.text} for m in self.messages)
        return wire


class ChatResponse(BaseModel):
    """A completed backbone call."""

    model_config = ConfigDict(frozen=True)

    text: str
    latency_seconds: float = Field(ge=0.0, allow_inf_nan=False)
    attempts: int = Field(ge=1)
    backend_name: str


class ScriptRule(BaseModel):
    """One canned reply of a scripted backend.

    A rule with ``match`` answers requests whose text contains that substring; a
    rule without one answers anything. ``repeat`` rules are never consumed.
    ``fail`` makes the rule raise the named failure instead of replying.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    match: str | None = None
    reply: str = ""
    repeat: bool = False
    fail: Literal["transport", "timeout"] | None = None


class BackendSpec(BaseModel):
    """Declarative description of one backbone."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(min_length=1)
    kind: Literal["live", "scripted"]
    endpoint: str | None = None
    model: str | None = None
    credential_env: str | None = None
    timeout_seconds: float = Field(default=DEFAULT_TIMEOUT_SECONDS, gt=0)
    retry_limit: int = Field(default=DEFAULT_RETRY_LIMIT, ge=0)
    backoff_seconds: float = Field(default=DEFAULT_BACKOFF_SECONDS, ge=0)
    temperature: float | None = Field(default=None, ge=0)
    top_p: float | None = Field(default=None, gt=0, le=1)
    max_tokens: int | None = Field(default=None, gt=0)
    script: tuple[ScriptRule, ...] = ()
    script_path: Path | None = None
    matching: bool = True
    delay_seconds: float = Field(default=0.0, ge=0)

    @field_validator("script", mode="before")
    @classmethod
    def _plain_replies(cls, value: Any) -> Any:
        if isinstance(value, list | tuple):
            return [{"reply": item} if isinstance(item, str) else item for item in value]
        return value

    @model_validator(mode="after")
    def _check_kind(self) -> BackendSpec:
        if self.kind == "live":
            missing = [f for f in ("endpoint", "model", "credential_env") if not getattr(self, f)]
            if missing:
                msg = f"live backend needs {', '.join(missing)}"
                raise ValueError(msg)
        return self


class RouteConfig(BaseModel):
    """Maps route keys to backend names; unlisted keys use ``default_backend``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(default="default", min_length=1)
    default_backend: str = Field(min_length=1)
    overrides: dict[str, str] = Field(default_factory=dict)

    @field_validator("overrides")
    @classmethod
    def _known_keys(cls, value: dict[str, str]) -> dict[str, str]:
        unknown = sorted(set(value) - ROUTE_KEYS)
        if unknown:
            msg = f"unknown route key(s): {', '.join(unknown)}"
            raise ValueError(msg)
        return value

    def backend_name(self, key: str) -> str:
        """Resolve a route key to a backend name.

        Raises:
            UnknownRouteKeyError: ``key`` is not a recognized route key.

        """
        if key not in ROUTE_KEYS:
            msg = f"unknown route key {key!r}"
            raise UnknownRouteKeyError(msg, key=key)
        return self.overrides.get(key, self.default_backend)


def route(cfg: RouteConfig, key: str, specs: Mapping[str, BackendSpec]) -> BackendSpec:
    """Return the spec of the backend serving ``key``.

    Raises:
        UnknownRouteKeyError: ``key`` is not a recognized route key.
        RouteConfigError: The resolved backend is not registered.

    """
    name = cfg.backend_name(key)
    if name not in specs:
        msg = f"route key {key!r} names unregistered backend {name!r}"
        raise RouteConfigError(msg, key=key)
    return specs[name]


class Clock(Protocol):
    """Monotonic time source used for latency, runtime and retry waits."""

    def now(self) -> float:
        """Current time in seconds."""
        ...

    def sleep(self, seconds: float) -> None:
        """Wait ``seconds``."""
        ...

    def fork(self) -> Clock:
        """Time base for work that runs alongside other work, starting now."""
        ...

    def merge(self, seconds: float) -> None:
        """Account for ``seconds`` spent on a forked time base."""
        ...


class SystemClock:
    """Wall clock backed by ``time.perf_counter``."""

    def now(self) -> float:
        """Return ``time.perf_counter()``."""
        return time.perf_counter()

    def sleep(self, seconds: float) -> None:
        """Block for ``seconds``."""
        time.sleep(seconds)

    def fork(self) -> SystemClock:
        """Wall time is shared; return ``self``."""
        return self

    def merge(self, seconds: float) -> None:
        """Nothing to do: the wall clock already moved."""


class FakeClock:
    """Deterministic clock: only ``sleep`` moves time forward."""

    def __init__(self, start: float = 0.0) -> None:
        """Start at ``start`` seconds."""
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        """Return the simulated time."""
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        """Advance the simulated time without blocking."""
        with self._lock:
            self._now += seconds

    def fork(self) -> FakeClock:
        """A separate simulated clock starting at the current time."""
        return FakeClock(self.now())

    def merge(self, seconds: float) -> None:
        """Advance by time spent on a forked clock."""
        self.sleep(seconds)


def _clock_wait(clock: Clock, interval: float) -> Generator[float | None, Any, None]:
    """Backoff wait generator that waits on ``clock`` and hands backoff a zero delay."""
    yield None  # primed by backoff before the first attempt
    while True:
        clock.sleep(interval)
        yield 0


class ChatBackend(ABC):
    """Base class for backbones: retries, latency measurement and logging."""

    def __init__(self, spec: BackendSpec, clock: Clock | None = None) -> None:
        """Bind the backend to its spec and clock."""
        self.spec = spec
        self.clock: Clock = clock or SystemClock()

    @property
    def name(self) -> str:
        """Backend name from the spec."""
        return self.spec.name

    @abstractmethod
    def _send(self, request: ChatRequest, stage: str | None, clock: Clock) -> str:
        """Perform one attempt and return the reply text."""

    def complete(
        self,
        request: ChatRequest,
        *,
        stage: str | None = None,
        clock: Clock | None = None,
    ) -> ChatResponse:
        """Send ``request``, retrying transport failures and timeouts.

        Args:
            request: The chat request.
            stage: Route key of the caller, carried into errors and logs.
            clock: Time base of the caller; defaults to the backend's own clock.

        Returns:
            The reply with latency measured across all attempts.

        Raises:
            BackendTimeoutError: Every attempt timed out (or the last one did).
            TransportError: Every attempt failed in transport.
            MissingCredentialError: The credential is not set; never retried.
            ScriptExhaustedError: A scripted backend ran out of rules; never retried.

        """
        clock = clock or self.clock
        attempts = 0

        def attempt() -> str:
            nonlocal attempts
            attempts += 1
            return self._send(request, stage, clock)

        def log_retry(details: dict[str, Any]) -> None:
            logger.warning(
                "Backend {} failed attempt {} during {}: {}",
                self.name,
                details["tries"],
                stage,
                details.get("exception"),
            )

        send = backoff.on_exception(
            _clock_wait,
            (TransportError, BackendTimeoutError),
            max_tries=self.spec.retry_limit + 1,
            jitter=None,
            on_backoff=log_retry,
            clock=clock,
            interval=self.spec.backoff_seconds,
        )(attempt)

        start = clock.now()
        text = send()
        latency = max(clock.now() - start, 0.0)
        logger.debug(
            "Backend {} answered {} in {:.3f}s after {} attempt(s)",
            self.name,
            request.turn_label or stage,
            latency,
            attempts,
        )
        return ChatResponse(
            text=text,
            latency_seconds=latency,
            attempts=attempts,
            backend_name=self.name,
        )


class LiveBackend(ChatBackend):
    """OpenAI-compatible chat-completions endpoint over HTTP."""

    def __init__(
        self,
        spec: BackendSpec,
        clock: Clock | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        """Create the backend; ``transport`` replaces the network in tests."""
        super().__init__(spec, clock)
        self._transport = transport

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        payload: dict[str, Any] = {"model": self.spec.model, "messages": request.to_wire()}
        for option in ("temperature", "top_p", "max_tokens"):
            value = getattr(self.spec, option)
            if value is not None:
                payload[option] = value
        return payload

    def _send(self, request: ChatRequest, stage: str | None, clock: Clock) -> str:  # noqa: ARG002
        env_name = self.spec.credential_env or ""
        api_key = os.environ.get(env_name)
        if not api_key:
            raise MissingCredentialError(
                self.name, stage, f"environment variable {env_name} is not set"
            )

        try:
            with httpx.Client(
                timeout=self.spec.timeout_seconds, transport=self._transport
            ) as client:
                response = client.post(
                    self.spec.endpoint or "",
                    headers={"Authorization": f"Bearer {api_key}"},
                    json=self._payload(request),
                )
                response.raise_for_status()
        except httpx.TimeoutException as e:
            raise BackendTimeoutError(self.name, stage, "request timed out") from e
        except httpx.HTTPStatusError as e:
            raise TransportError(
                self.name, stage, f"HTTP {e.response.status_code}"
            ) from e
        except httpx.RequestError as e:
            raise TransportError(self.name, stage, type(e).__name__) from e

        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransportError(self.name, stage, "malformed response body") from e
        if not isinstance(content, str):
            raise TransportError(self.name, stage, "response content is not text")
        return content


class Script:
    """Thread-safe queue of ``ScriptRule``s."""

    def __init__(
        self,
        rules: Iterable[ScriptRule],
        *,
        matching: bool = True,
        name: str = "scripted",
    ) -> None:
        """Hold ``rules`` in order; ``matching`` enables substring selection."""
        self._rules = list(rules)
        self.matching = matching
        self.name = name
        self._lock = threading.Lock()

    def __len__(self) -> int:
        """Rules left."""
        with self._lock:
            return len(self._rules)

    def _select(self, text: str) -> int | None:
        if not self._rules:
            return None
        if not self.matching:
            return 0
        fallback = None
        for index, rule in enumerate(self._rules):
            if rule.match is None:
                if fallback is None:
                    fallback = index
            elif rule.match in text:
                return index
        return fallback

    def take(self, text: str) -> ScriptRule | None:
        """Pick the rule answering ``text``, consuming it unless it repeats."""
        with self._lock:
            index = self._select(text)
            if index is None:
                return None
            rule = self._rules[index]
            if not rule.repeat:
                del self._rules[index]
            return rule


def respond(script: Script, request: ChatRequest, *, stage: str | None = None) -> str:
    """Answer ``request`` from ``script``.

    Raises:
        ScriptExhaustedError: No rule answers the request.
        TransportError: The selected rule injects a transport failure.
        BackendTimeoutError: The selected rule injects a timeout.

    """
    rule = script.take(request.full_text())
    if rule is None:
        raise ScriptExhaustedError(script.name, stage, "no scripted reply left")
    if rule.fail == "transport":
        raise TransportError(script.name, stage, "scripted transport failure")
    if rule.fail == "timeout":
        raise BackendTimeoutError(script.name, stage, "scripted timeout")
    return rule.reply


def load_script_rules(path: Path) -> list[ScriptRule]:
    """Read a JSON array of rules (or of plain reply strings) from ``path``."""
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, list):
        msg = f"script file {path} must hold a JSON array"
        raise TypeError(msg)
    return [
        ScriptRule(reply=item) if isinstance(item, str) else ScriptRule.model_validate(item)
        for item in data
    ]


class ScriptedBackend(ChatBackend):
    """Deterministic backbone answering from a script."""

    def __init__(
        self,
        spec: BackendSpec,
        clock: Clock | None = None,
        rules: Iterable[ScriptRule] | None = None,
    ) -> None:
        """Load rules from ``rules``, else the spec's inline rules and script file."""
        super().__init__(spec, clock)
        if rules is None:
            rules = list(spec.script)
            if spec.script_path is not None:
                rules.extend(load_script_rules(spec.script_path))
        self.script = Script(rules, matching=spec.matching, name=spec.name)

    @classmethod
    def from_replies(
        cls,
        name: str,
        replies: Iterable[str | ScriptRule],
        *,
        clock: Clock | None = None,
        **spec_fields: Any,
    ) -> ScriptedBackend:
        """Build a backend from plain reply strings and/or rules."""
        rules = [r if isinstance(r, ScriptRule) else ScriptRule(reply=r) for r in replies]
        spec_fields.setdefault("backoff_seconds", 0.0)
        spec = BackendSpec(name=name, kind="scripted", **spec_fields)
        return cls(spec, clock, rules)

    def _send(self, request: ChatRequest, stage: str | None, clock: Clock) -> str:
        if self.spec.delay_seconds:
            clock.sleep(self.spec.delay_seconds)
        return respond(self.script, request, stage=stage)


def build_backend(spec: BackendSpec, clock: Clock | None = None) -> ChatBackend:
    """Instantiate the backend described by ``spec``."""
    if spec.kind == "live":
        return LiveBackend(spec, clock)
    return ScriptedBackend(spec, clock)


class Router:
    """Resolves route keys to live backend instances."""

    def __init__(self, config: RouteConfig, backends: Mapping[str, ChatBackend]) -> None:
        """Check that every key resolves to a registered backend.

        Raises:
            RouteConfigError: A key names a backend missing from ``backends``.

        """
        for key in sorted(ROUTE_KEYS):
            name = config.backend_name(key)
            if name not in backends:
                origin = key if key in config.overrides else "default_backend"
                msg = f"route key {origin!r} names unregistered backend {name!r}"
                raise RouteConfigError(msg, key=origin)
        self.config = config
        self.backends = dict(backends)

    @property
    def name(self) -> str:
        """Route configuration name, used as the report row label."""
        return self.config.name

    @classmethod
    def from_specs(
        cls,
        config: RouteConfig,
        specs: Iterable[BackendSpec],
        clock: Clock | None = None,
    ) -> Router:
        """Build every backend in ``specs`` and route over them."""
        backends = {spec.name: build_backend(spec, clock) for spec in specs}
        return cls(config, backends)

    @classmethod
    def uniform(cls, backend: ChatBackend, *, name: str | None = None) -> Router:
        """Route every key to ``backend``."""
        config = RouteConfig(name=name or backend.name, default_backend=backend.name)
        return cls(config, {backend.name: backend})

    def route(self, key: str) -> ChatBackend:
        """Backend serving ``key``."""
        return self.backends[self.config.backend_name(key)]


@dataclass(frozen=True)
class PromptRecord:
    """A prompt as sent to a backbone, kept for leakage checks."""

    key: str
    role: str
    text: str


class EntrySession:
    """Call gateway and transcript recorder for one benchmark entry.

    ``call`` is the usual path. Concurrent stages use ``request(..., detached=True)``
    from worker threads and ``commit(..., detached=True)`` the responses afterwards in
    a fixed order, so neither the transcript nor simulated time depends on thread
    scheduling.

    With a ``clock``, every backend call waits on it; otherwise on the backend's own.
    """

    def __init__(self, entry_id: str, router: Router, clock: Clock | None = None) -> None:
        """Start an empty transcript for ``entry_id``."""
        self.entry_id = entry_id
        self.router = router
        self.clock = clock
        self.prompts: list[PromptRecord] = []
        self.call_counts: Counter[str] = Counter()
        self._events: list[TranscriptEvent] = []
        self._lock = threading.Lock()

    def request(self, key: str, req: ChatRequest, *, detached: bool = False) -> ChatResponse:
        """Run a call on the backend routed for ``key`` without recording it.

        ``detached`` calls run on a fork of the session clock; ``commit`` them with
        ``detached=True`` to account for their latency.
        """
        clock = self.clock.fork() if detached and self.clock is not None else self.clock
        return self.router.route(key).complete(req, stage=key, clock=clock)

    def commit(
        self,
        key: str,
        role: str,
        req: ChatRequest,
        response: ChatResponse,
        *,
        stage: str | None = None,
        detached: bool = False,
    ) -> str:
        """Record a finished call and return its text."""
        if detached and self.clock is not None:
            self.clock.merge(response.latency_seconds)
        with self._lock:
            self.prompts.append(PromptRecord(key=key, role=role, text=req.full_text()))
            self.call_counts[key] += 1
            self._events.append(
                TranscriptEvent(
                    role=role,
                    text=response.text,
                    backend_name=response.backend_name,
                    latency_seconds=response.latency_seconds,
                    stage=stage,
                ),
            )
        return response.text

    def call(self, key: str, role: str, req: ChatRequest, *, stage: str | None = None) -> str:
        """Call the backend for ``key`` and record the reply under ``role``."""
        return self.commit(key, role, req, self.request(key, req), stage=stage)

    def note(
        self,
        role: str,
        text: str,
        *,
        stage: str | None = None,
        backend_name: str = "",
    ) -> None:
        """Record an event that involved no backbone call."""
        with self._lock:
            self._events.append(
                TranscriptEvent(role=role, text=text, backend_name=backend_name, stage=stage),
            )

    def fail(self, error: Exception) -> None:
        """Record why the entry failed."""
        self.note(ROLE_SYSTEM, f"Entry failed: {error}", stage="error")

    @property
    def call_count(self) -> int:
        """Backbone calls committed so far."""
        with self._lock:
            return sum(self.call_counts.values())

    def transcript(self) -> Transcript:
        """Snapshot of the transcript."""
        with self._lock:
            return Transcript(entry_id=self.entry_id, events=tuple(self._events))
