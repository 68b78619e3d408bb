"""Model-backend gateway: profiles, failure taxonomy, retry, scripted backends.

Two backend kinds share one calling convention: ``remote-chat`` speaks an
HTTP chat-completions dialect through an injectable transport, and
``scripted`` replays rule-matched responses deterministically (the workhorse
for tests and offline scenario runs).  Failures are classified into a small
taxonomy that drives retry and fallback decisions everywhere else.
"""
from __future__ import annotations

import json
import logging
import os
import re
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

from .events import EventLog
from .messages import Message

logger = logging.getLogger(__name__)

ENV_BACKEND_URL = "AGENTFLOW_BACKEND_URL"
ENV_BACKEND_KEY = "AGENTFLOW_BACKEND_KEY"

BACKEND_KINDS = ("remote-chat", "scripted")

DEFAULT_TIMEOUT = 30.0
DEFAULT_MAX_CONTEXT_TOKENS = 32768


class FailureClass(str, Enum):
    TRANSIENT_NETWORK = "transient-network"
    RATE_LIMIT = "rate-limit"
    TIMEOUT = "timeout"
    MALFORMED_RESPONSE = "malformed-response"
    PERMANENT = "permanent"


DEFAULT_RETRYABLE = frozenset(
    {
        FailureClass.TRANSIENT_NETWORK,
        FailureClass.RATE_LIMIT,
        FailureClass.TIMEOUT,
        FailureClass.MALFORMED_RESPONSE,
    }
)


class BackendFailure(Exception):
    """A single failed completion attempt, tagged with its failure class."""

    def __init__(self, failure_class: FailureClass, detail: str, status: int | None = None):
        self.failure_class = failure_class
        self.detail = detail
        self.status = status
        super().__init__(f"[{failure_class.value}] {detail}")


class RetriesExhausted(Exception):
    """Every allowed attempt failed with a retryable class."""

    def __init__(self, last_failure: BackendFailure, attempts: int):
        self.last_failure = last_failure
        self.attempts = attempts
        super().__init__(f"retries exhausted after {attempts} attempts: {last_failure}")


class NonretryableFailure(Exception):
    """The attempt failed with a class outside the retryable set."""

    def __init__(self, failure: BackendFailure):
        self.failure = failure
        super().__init__(f"nonretryable failure: {failure}")


class ScriptFormatError(Exception):
    """A backend script file does not follow the rule format."""


@dataclass(frozen=True)
class Backoff:
    base: float = 0.5
    multiplier: float = 2.0

    def delay_for(self, attempt: int) -> float:
        return self.base * self.multiplier ** (attempt - 1)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: Backoff = field(default_factory=Backoff)
    retryable_classes: frozenset[FailureClass] = DEFAULT_RETRYABLE
    deterministic_mode: bool = False

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")


@dataclass(frozen=True)
class BackendProfile:
    """Connection/behavior settings for one named backend."""

    id: str
    kind: str
    endpoint: str | None = None
    model_name: str | None = None
    temperature: float = 0.0
    timeout: float = DEFAULT_TIMEOUT
    max_context_tokens: int = DEFAULT_MAX_CONTEXT_TOKENS
    script: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind: {self.kind!r}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind,
            "endpoint": self.endpoint,
            "model_name": self.model_name,
            "temperature": self.temperature,
            "timeout": self.timeout,
            "max_context_tokens": self.max_context_tokens,
            "script": self.script,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackendProfile":
        return cls(
            id=str(data["id"]),
            kind=str(data["kind"]),
            endpoint=data.get("endpoint"),
            model_name=data.get("model_name"),
            temperature=float(data.get("temperature", 0.0)),
            timeout=float(data.get("timeout", DEFAULT_TIMEOUT)),
            max_context_tokens=int(data.get("max_context_tokens", DEFAULT_MAX_CONTEXT_TOKENS)),
            script=data.get("script"),
        )


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    node_id: str = ""

    def text(self) -> str:
        return "\n\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    message: Message
    finish_reason: str = "stop"
    prompt_tokens: int = 0
    completion_tokens: int = 0


def estimate_tokens(text: str) -> int:
    """Cheap length-based token estimate (about four characters per token)."""
    return max(1, len(text) // 4) if text else 0


def request_tokens(request: ChatRequest, estimator: Callable[[str], int] = estimate_tokens) -> int:
    return sum(estimator(m.content) for m in request.messages)


# ---------------------------------------------------------------------------
# Failure classification
# ---------------------------------------------------------------------------

_STATUS_RE = re.compile(r"\b([45]\d{2})\b")

_TIMEOUT_WORDS = ("timed out", "timeout", "deadline exceeded", "deadline reached")
_RATE_WORDS = ("rate limit", "too many requests", "quota exceeded")
_NETWORK_WORDS = (
    "failed to resolve",
    "name or service not known",
    "temporary failure in name resolution",
    "max retries exceeded",
    "connection reset",
    "connection refused",
    "connection aborted",
    "network is unreachable",
    "dns",
    "remote end closed",
)
_PARSE_WORDS = (
    "invalid json",
    "error parsing",
    "unparseable",
    "malformed response",
    "expecting value",
    "invalid control character",
    "unterminated string",
)


def classify_failure(error: str | BaseException) -> FailureClass:
    """Map an error (exception or message text) onto the failure taxonomy.

    Order of evidence: an explicit :class:`BackendFailure` keeps its class;
    well-known exception types are mapped directly; an embedded HTTP status
    decides next (429 rate-limit, 408 timeout, other 4xx permanent, 5xx
    transient); finally message wording is matched, and anything still
    unrecognized is treated as transient so retry gets a chance.
    """
    if isinstance(error, BackendFailure):
        return error.failure_class
    if isinstance(error, (socket.timeout, TimeoutError)):
        return FailureClass.TIMEOUT
    if isinstance(error, json.JSONDecodeError):
        return FailureClass.MALFORMED_RESPONSE
    if isinstance(error, ConnectionError):
        return FailureClass.TRANSIENT_NETWORK

    text = str(error).lower()
    match = _STATUS_RE.search(text)
    if match:
        status = int(match.group(1))
        if status == 429:
            return FailureClass.RATE_LIMIT
        if status == 408:
            return FailureClass.TIMEOUT
        if 400 <= status < 500:
            return FailureClass.PERMANENT
        return FailureClass.TRANSIENT_NETWORK
    if any(word in text for word in _RATE_WORDS):
        return FailureClass.RATE_LIMIT
    if any(word in text for word in _TIMEOUT_WORDS):
        return FailureClass.TIMEOUT
    if any(word in text for word in _NETWORK_WORDS):
        return FailureClass.TRANSIENT_NETWORK
    if any(word in text for word in _PARSE_WORDS):
        return FailureClass.MALFORMED_RESPONSE
    return FailureClass.TRANSIENT_NETWORK


# ---------------------------------------------------------------------------
# Retry wrapper
# ---------------------------------------------------------------------------


def with_retry(
    policy: RetryPolicy,
    attempt_fn: Callable[[], Any],
    *,
    log: EventLog | None = None,
    node_id: str = "",
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """Run *attempt_fn* under the retry policy.

    Only retryable failure classes are retried, never beyond
    ``policy.max_attempts`` total attempts.  Every failed attempt emits one
    ``retry`` event (successful calls emit nothing).  Raises
    :class:`NonretryableFailure` on the first non-retryable class and
    :class:`RetriesExhausted` when attempts run out.  In deterministic mode
    no time passes between attempts.
    """
    failure: BackendFailure | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return attempt_fn()
        except BackendFailure as exc:
            failure = exc
        except (RetriesExhausted, NonretryableFailure):
            raise
        except Exception as exc:  # noqa: BLE001 - every attempt error must be classified
            failure = BackendFailure(classify_failure(exc), str(exc))
        retryable = failure.failure_class in policy.retryable_classes
        will_retry = retryable and attempt < policy.max_attempts
        if log is not None:
            log.emit(
                "retry",
                node_id,
                {
                    "attempt": attempt,
                    "failure_class": failure.failure_class.value,
                    "detail": failure.detail[:200],
                    "will_retry": will_retry,
                },
            )
        if not retryable:
            raise NonretryableFailure(failure)
        if not will_retry:
            raise RetriesExhausted(failure, attempts=attempt)
        if not policy.deterministic_mode:
            sleep(policy.backoff.delay_for(attempt))
    raise RetriesExhausted(failure, attempts=policy.max_attempts)  # pragma: no cover - loop always exits above


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------

_MATCHER_KINDS = ("substring", "exact", "regex")


@dataclass(frozen=True)
class ScriptRule:
    """One scripted response rule; the first matching rule wins.

    ``fail_count`` makes the rule raise ``fail_class`` that many times
    before it starts answering — the standard way to script flaky behavior.
    """

    matcher_kind: str
    pattern: str
    response: str
    fail_count: int = 0
    fail_class: FailureClass = FailureClass.TRANSIENT_NETWORK

    def matches(self, text: str) -> bool:
        if self.matcher_kind == "substring":
            return self.pattern in text
        if self.matcher_kind == "exact":
            return self.pattern == text
        return re.search(self.pattern, text, re.DOTALL) is not None


def _parse_rule(raw: Any, index: int) -> ScriptRule:
    where = f"rule {index}"
    if not isinstance(raw, dict):
        raise ScriptFormatError(f"{where}: each rule must be an object")
    match = raw.get("match")
    if not isinstance(match, dict) or len(match) != 1:
        raise ScriptFormatError(f"{where}: 'match' must be an object with exactly one matcher")
    kind, pattern = next(iter(match.items()))
    if kind not in _MATCHER_KINDS:
        raise ScriptFormatError(f"{where}: unknown matcher {kind!r} (expected one of {_MATCHER_KINDS})")
    if not isinstance(pattern, str):
        raise ScriptFormatError(f"{where}: matcher pattern must be a string")
    if kind == "regex":
        try:
            re.compile(pattern)
        except re.error as exc:
            raise ScriptFormatError(f"{where}: invalid regex: {exc}") from exc
    response = raw.get("response", "")
    if not isinstance(response, str):
        raise ScriptFormatError(f"{where}: 'response' must be a string")
    fail_count = raw.get("fail_count", 0)
    if isinstance(fail_count, bool) or not isinstance(fail_count, int) or fail_count < 0:
        raise ScriptFormatError(f"{where}: 'fail_count' must be a nonnegative integer")
    fail_class_raw = raw.get("fail_class", FailureClass.TRANSIENT_NETWORK.value)
    try:
        fail_class = FailureClass(fail_class_raw)
    except ValueError as exc:
        raise ScriptFormatError(f"{where}: unknown fail_class {fail_class_raw!r}") from exc
    unknown = set(raw) - {"match", "response", "fail_count", "fail_class"}
    if unknown:
        raise ScriptFormatError(f"{where}: unknown keys {sorted(unknown)}")
    return ScriptRule(
        matcher_kind=kind, pattern=pattern, response=response, fail_count=fail_count, fail_class=fail_class
    )


def parse_script(data: Any) -> list[ScriptRule]:
    if not isinstance(data, list):
        raise ScriptFormatError("a script must be a JSON list of rules")
    return [_parse_rule(raw, index) for index, raw in enumerate(data)]


def load_script(path: str | Path) -> list[ScriptRule]:
    """Load an ordered rule list from a JSON script file.

    An empty list is valid: the backend then fails permanently for every
    request ("no rule matched").
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScriptFormatError(f"script {path} is not valid JSON: {exc}") from exc
    return parse_script(data)


class ScriptedBackend:
    """Deterministic backend: responses are a pure function of the request.

    The only mutable state is per-rule remaining failure counters (and a
    call counter); both are exposed via :meth:`state` / :meth:`restore` so
    checkpoints can capture them exactly.
    """

    def __init__(
        self,
        profile: BackendProfile,
        rules: list[ScriptRule],
        estimator: Callable[[str], int] = estimate_tokens,
    ):
        self.profile = profile
        self.rules = list(rules)
        self._estimator = estimator
        self._lock = threading.Lock()
        self._remaining = [rule.fail_count for rule in self.rules]
        self.calls = 0

    def state(self) -> dict[str, Any]:
        with self._lock:
            return {"remaining": list(self._remaining), "calls": self.calls}

    def restore(self, state: dict[str, Any]) -> None:
        with self._lock:
            remaining = list(state.get("remaining", []))
            if len(remaining) != len(self.rules):
                raise ValueError("scripted backend state does not match the script")
            self._remaining = [int(v) for v in remaining]
            self.calls = int(state.get("calls", 0))

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt_tokens = request_tokens(request, self._estimator)
        if prompt_tokens > self.profile.max_context_tokens:
            # Guarded before any matching, mirroring the remote context guard.
            raise BackendFailure(
                FailureClass.PERMANENT,
                f"request of ~{prompt_tokens} tokens exceeds the context window "
                f"({self.profile.max_context_tokens}) of backend {self.profile.id!r}",
            )
        text = request.text()
        with self._lock:
            self.calls += 1
            for index, rule in enumerate(self.rules):
                if not rule.matches(text):
                    continue
                if self._remaining[index] > 0:
                    self._remaining[index] -= 1
                    raise BackendFailure(
                        rule.fail_class,
                        f"scripted failure injected by rule {index} of backend {self.profile.id!r}",
                    )
                return ChatResponse(
                    message=Message(role="assistant", content=rule.response, node_id=request.node_id),
                    finish_reason="stop",
                    prompt_tokens=prompt_tokens,
                    completion_tokens=self._estimator(rule.response),
                )
        raise BackendFailure(
            FailureClass.PERMANENT,
            f"no script rule matched the request on backend {self.profile.id!r}",
        )


# ---------------------------------------------------------------------------
# Remote chat backend
# ---------------------------------------------------------------------------

Transport = Callable[[str, dict[str, str], dict[str, Any], float], tuple[int, str]]


def _urllib_transport(url: str, headers: dict[str, str], payload: dict[str, Any], timeout: float) -> tuple[int, str]:
    body = json.dumps(payload).encode("utf-8")
    request = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json", **headers})
    try:
        with urllib.request.urlopen(request, timeout=timeout) as response:
            return response.status, response.read().decode("utf-8")
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read().decode("utf-8", errors="replace")


class RemoteChatBackend:
    """HTTP chat-completions backend with an injectable transport."""

    def __init__(
        self,
        profile: BackendProfile,
        transport: Transport | None = None,
        api_key: str | None = None,
        estimator: Callable[[str], int] = estimate_tokens,
    ):
        self.profile = profile
        self._transport = transport or _urllib_transport
        self._api_key = api_key if api_key is not None else os.environ.get(ENV_BACKEND_KEY, "")
        self._estimator = estimator
        self.calls = 0

    @property
    def endpoint(self) -> str:
        override = os.environ.get(ENV_BACKEND_URL)
        endpoint = override or self.profile.endpoint
        if not endpoint:
            raise BackendFailure(
                FailureClass.PERMANENT,
                f"backend {self.profile.id!r} has no endpoint configured (set {ENV_BACKEND_URL})",
            )
        return endpoint

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt_tokens = request_tokens(request, self._estimator)
        if prompt_tokens > self.profile.max_context_tokens:
            # Refuse before any network traffic: resending cannot succeed.
            raise BackendFailure(
                FailureClass.PERMANENT,
                f"request of ~{prompt_tokens} tokens exceeds the context window "
                f"({self.profile.max_context_tokens}) of backend {self.profile.id!r}",
            )
        payload = {
            "model": self.profile.model_name or self.profile.id,
            "temperature": self.profile.temperature,
            "messages": [
                # Providers reject bare tool-role messages without call ids,
                # so tool feedback is downgraded to user-role content.
                {"role": m.role if m.role != "tool" else "user", "content": m.content}
                for m in request.messages
            ],
        }
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        endpoint = self.endpoint
        self.calls += 1
        try:
            status, body = self._transport(endpoint, headers, payload, self.profile.timeout)
        except BackendFailure:
            raise
        except Exception as exc:  # noqa: BLE001 - transport errors must be classified
            raise BackendFailure(classify_failure(exc), str(exc)) from exc
        if status != 200:
            raise BackendFailure(classify_failure(f"HTTP {status}: {body[:200]}"), f"HTTP {status}: {body[:200]}", status)
        try:
            parsed = json.loads(body)
            content = parsed["choices"][0]["message"]["content"]
            if not isinstance(content, str):
                raise TypeError("message content is not a string")
        except Exception as exc:  # noqa: BLE001 - any shape problem is a malformed response
            raise BackendFailure(FailureClass.MALFORMED_RESPONSE, f"unparseable completion body: {exc}") from exc
        usage = parsed.get("usage", {}) if isinstance(parsed, dict) else {}
        return ChatResponse(
            message=Message(role="assistant", content=content, node_id=request.node_id),
            finish_reason=str(parsed.get("choices", [{}])[0].get("finish_reason", "stop")),
            prompt_tokens=int(usage.get("prompt_tokens", prompt_tokens)),
            completion_tokens=int(usage.get("completion_tokens", self._estimator(content))),
        )


def build_backend(
    profile: BackendProfile,
    *,
    rules: list[ScriptRule] | None = None,
    transport: Transport | None = None,
    base_dir: str | Path | None = None,
) -> ScriptedBackend | RemoteChatBackend:
    """Construct the backend implementation for a profile.

    Scripted profiles take their rules either inline (*rules*) or from the
    profile's ``script`` path, resolved against *base_dir* when relative.
    """
    if profile.kind == "scripted":
        if rules is None:
            if not profile.script:
                raise ScriptFormatError(f"scripted backend {profile.id!r} declares no script")
            script_path = Path(profile.script)
            if base_dir is not None and not script_path.is_absolute():
                script_path = Path(base_dir) / script_path
            rules = load_script(script_path)
        return ScriptedBackend(profile, rules)
    return RemoteChatBackend(profile, transport=transport)
