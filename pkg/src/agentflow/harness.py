"""Scenario harness: declarative end-to-end runs with fault injection.

A scenario file bundles a graph, a user query, scripted backend profiles,
tool fixtures, optional injected faults, and the expected outcome.  The
harness runs the scenario (optionally several times), checks that repeated
runs agree byte-for-byte on the stripped event-log digest, grades the
answer (exact canonical match first, an optional equivalence-judge backend
second), and renders machine- and human-readable summaries.
"""
from __future__ import annotations

import json
import logging
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backend import (
    BackendFailure,
    BackendProfile,
    ChatRequest,
    ChatResponse,
    FailureClass,
    RetryPolicy,
    build_backend,
    estimate_tokens,
)
from .controller import (
    RunStore,
    StorageError,
    WallClockExceeded,
    execute_task,
)
from .events import EventLog, canonical_json
from .graph import AgentGraphSpec, load_graph_spec, validate_graph
from .messages import Message, canonicalize_answer
from .prompts import load_prompt
from .runtime import STATUS_BUDGET_STOP, STATUS_FINISHED, RunEnv
from .tools import (
    FAULT_TYPES,
    ToolFault,
    ToolRegistry,
    load_tool_manifest,
    register_builtin_stubs,
)

logger = logging.getLogger(__name__)

STATUSES = (STATUS_FINISHED, "turn-limit", STATUS_BUDGET_STOP)

_SCENARIO_KEYS = {
    "name",
    "query",
    "graph",
    "backends",
    "tool_manifest",
    "search_corpus",
    "files_root",
    "builtin_tools",
    "injected_faults",
    "judge_backend",
    "seed",
    "expected",
}
_EXPECTED_KEYS = {"answer", "format_tag", "status", "event_kinds"}
_FAULT_KEYS = {"target", "fault", "trigger", "match", "repeat"}


class ScenarioError(Exception):
    """The scenario file is malformed or internally inconsistent."""


# ---------------------------------------------------------------------------
# Fault injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultInjection:
    """One armed fault.

    ``target`` is ``backend:<profile-id>`` or ``tool:<server>/<tool>``.
    ``fault`` either raises (``{"class": ...}`` for backends,
    ``{"fault_type": ...}`` for tools, with an optional ``detail``) or
    overrides the reply (``{"payload": ...}``).  The fault fires from the
    ``trigger``-th call (1-based) or whenever ``match`` occurs in the
    request, for ``repeat`` shots (``"persistent"`` = forever).
    """

    target: str
    fault: dict[str, Any]
    trigger: int | None = None
    match: str | None = None
    repeat: int | str = 1


def parse_fault_injection(raw: Any, index: int) -> FaultInjection:
    where = f"injected_faults[{index}]"
    if not isinstance(raw, dict):
        raise ScenarioError(f"{where}: must be an object")
    unknown = set(raw) - _FAULT_KEYS
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
    target = raw.get("target")
    if not isinstance(target, str) or not (target.startswith("backend:") or target.startswith("tool:")):
        raise ScenarioError(f"{where}: 'target' must start with 'backend:' or 'tool:'")
    fault = raw.get("fault")
    if not isinstance(fault, dict):
        raise ScenarioError(f"{where}: 'fault' must be an object")
    mode_keys = {"class", "fault_type", "payload"} & set(fault)
    if len(mode_keys) != 1:
        raise ScenarioError(f"{where}: 'fault' needs exactly one of 'class', 'fault_type', 'payload'")
    if "class" in fault:
        if not target.startswith("backend:"):
            raise ScenarioError(f"{where}: failure classes apply to backend targets only")
        try:
            FailureClass(fault["class"])
        except ValueError as exc:
            raise ScenarioError(f"{where}: unknown failure class {fault['class']!r}") from exc
    if "fault_type" in fault:
        if not target.startswith("tool:"):
            raise ScenarioError(f"{where}: fault types apply to tool targets only")
        if fault["fault_type"] not in FAULT_TYPES:
            raise ScenarioError(f"{where}: unknown fault type {fault['fault_type']!r}")
    trigger = raw.get("trigger")
    match = raw.get("match")
    if (trigger is None) == (match is None):
        raise ScenarioError(f"{where}: provide exactly one of 'trigger' (call ordinal) or 'match' (substring)")
    if trigger is not None and (isinstance(trigger, bool) or not isinstance(trigger, int) or trigger < 1):
        raise ScenarioError(f"{where}: 'trigger' must be a positive call ordinal")
    if match is not None and not isinstance(match, str):
        raise ScenarioError(f"{where}: 'match' must be a string")
    repeat = raw.get("repeat", 1)
    if repeat != "persistent" and (isinstance(repeat, bool) or not isinstance(repeat, int) or repeat < 1):
        raise ScenarioError(f"{where}: 'repeat' must be a positive integer or 'persistent'")
    return FaultInjection(target=target, fault=dict(fault), trigger=trigger, match=match, repeat=repeat)


class _ArmedFault:
    """Mutable firing state for one injection."""

    def __init__(self, injection: FaultInjection):
        self.injection = injection
        self.remaining: int | None = None if injection.repeat == "persistent" else int(injection.repeat)

    def should_fire(self, call_number: int, request_text: str) -> bool:
        if self.remaining is not None and self.remaining <= 0:
            return False
        if self.injection.match is not None:
            triggered = self.injection.match in request_text
        else:
            triggered = call_number >= (self.injection.trigger or 1)
        if triggered and self.remaining is not None:
            self.remaining -= 1
        return triggered

    def state(self) -> int | None:
        return self.remaining

    def restore(self, value: int | None) -> None:
        self.remaining = value if value is None else int(value)


class InjectingBackend:
    """Wraps a backend, firing armed faults before the real implementation.

    Payload faults substitute the assistant reply (useful for injecting
    malformed tool-call syntax); class faults raise a typed failure.
    """

    def __init__(self, inner: Any, injections: list[FaultInjection]):
        self.inner = inner
        self.profile = inner.profile
        self._armed = [_ArmedFault(i) for i in injections]
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        text = request.text()
        with self._lock:
            self.calls += 1
            call_number = self.calls
            firing = next((a for a in self._armed if a.should_fire(call_number, text)), None)
        if firing is not None:
            fault = firing.injection.fault
            if "payload" in fault:
                payload = str(fault["payload"])
                return ChatResponse(
                    message=Message(role="assistant", content=payload, node_id=request.node_id),
                    finish_reason="stop",
                    prompt_tokens=estimate_tokens(text),
                    completion_tokens=estimate_tokens(payload),
                )
            failure_class = FailureClass(fault["class"])
            detail = str(fault.get("detail", f"injected {failure_class.value} fault"))
            raise BackendFailure(failure_class, detail)
        return self.inner.complete(request)

    def state(self) -> dict[str, Any]:
        with self._lock:
            inner_state = self.inner.state() if callable(getattr(self.inner, "state", None)) else None
            return {
                "calls": self.calls,
                "injections": [a.state() for a in self._armed],
                "inner": inner_state,
            }

    def restore(self, state: dict[str, Any]) -> None:
        with self._lock:
            self.calls = int(state.get("calls", 0))
            remaining = state.get("injections", [])
            for armed, value in zip(self._armed, remaining):
                armed.restore(value)
            if state.get("inner") is not None and callable(getattr(self.inner, "restore", None)):
                self.inner.restore(state["inner"])


class _InjectedToolImpl:
    """Tool-implementation wrapper with the same firing semantics."""

    def __init__(self, inner: Any, injections: list[FaultInjection]):
        self.inner = inner
        self._armed = [_ArmedFault(i) for i in injections]
        self._lock = threading.Lock()
        self.calls = 0

    def __call__(self, arguments: dict[str, Any]) -> str:
        text = canonical_json(arguments)
        with self._lock:
            self.calls += 1
            call_number = self.calls
            firing = next((a for a in self._armed if a.should_fire(call_number, text)), None)
        if firing is not None:
            fault = firing.injection.fault
            if "payload" in fault:
                return str(fault["payload"])
            fault_type = str(fault["fault_type"])
            detail = str(fault.get("detail", f"injected {fault_type} fault"))
            raise ToolFault(fault_type, detail)
        return self.inner(arguments)

    def state(self) -> dict[str, Any]:
        with self._lock:
            inner_state = self.inner.state() if callable(getattr(self.inner, "state", None)) else None
            return {
                "calls": self.calls,
                "injections": [a.state() for a in self._armed],
                "inner": inner_state,
            }

    def restore(self, state: dict[str, Any]) -> None:
        with self._lock:
            self.calls = int(state.get("calls", 0))
            for armed, value in zip(self._armed, state.get("injections", [])):
                armed.restore(value)
            if state.get("inner") is not None and callable(getattr(self.inner, "restore", None)):
                self.inner.restore(state["inner"])


# ---------------------------------------------------------------------------
# Scenario specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpectedOutcome:
    answer: str
    format_tag: str | None = None
    status: str = STATUS_FINISHED
    event_kinds: tuple[str, ...] = ()


@dataclass
class ScenarioSpec:
    name: str
    query: str
    graph: AgentGraphSpec
    backend_profiles: list[BackendProfile]
    expected: ExpectedOutcome
    base_dir: Path
    tool_manifest: dict[str, Any] | str | None = None
    search_corpus: list[dict[str, Any]] | None = None
    files_root: Path | None = None
    builtin_tools: bool = True
    injected_faults: list[FaultInjection] = field(default_factory=list)
    judge_backend: str | None = None
    seed: int = 0


def load_scenario(path: str | Path) -> ScenarioSpec:
    """Load and fully validate one scenario file.

    Relative paths inside the file resolve against its directory.  The
    expected answer must already be in canonical form for its format tag —
    a non-canonical expectation is a fixture bug, caught here.
    """
    path = Path(path)
    base_dir = path.parent
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError(f"scenario {path} must be a JSON object")
    unknown = set(data) - _SCENARIO_KEYS
    if unknown:
        raise ScenarioError(f"scenario {path}: unknown keys {sorted(unknown)}")
    for required in ("name", "query", "graph", "backends", "expected"):
        if required not in data:
            raise ScenarioError(f"scenario {path}: missing required key {required!r}")

    graph_path = Path(data["graph"])
    if not graph_path.is_absolute():
        graph_path = base_dir / graph_path
    graph = load_graph_spec(graph_path)
    report = validate_graph(graph)
    if not report.ok:
        raise ScenarioError(f"scenario {path}: graph is invalid:\n" + "\n".join(report.lines()))

    raw_backends = data["backends"]
    if not isinstance(raw_backends, list) or not raw_backends:
        raise ScenarioError(f"scenario {path}: 'backends' must be a non-empty list of profiles")
    profiles = []
    for index, raw in enumerate(raw_backends):
        try:
            profiles.append(BackendProfile.from_dict(raw))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"scenario {path}: backends[{index}]: {exc}") from exc
    profile_ids = [p.id for p in profiles]
    if len(set(profile_ids)) != len(profile_ids):
        raise ScenarioError(f"scenario {path}: duplicate backend profile ids")
    declared = {node.backend for node in graph.nodes.values()}
    missing = sorted(declared - set(profile_ids))
    if missing:
        raise ScenarioError(f"scenario {path}: graph references undefined backends {missing}")

    raw_expected = data["expected"]
    if not isinstance(raw_expected, dict):
        raise ScenarioError(f"scenario {path}: 'expected' must be an object")
    unknown = set(raw_expected) - _EXPECTED_KEYS
    if unknown:
        raise ScenarioError(f"scenario {path}: expected: unknown keys {sorted(unknown)}")
    answer = raw_expected.get("answer")
    if not isinstance(answer, str) or not answer:
        raise ScenarioError(f"scenario {path}: expected.answer must be a non-empty string")
    format_tag = raw_expected.get("format_tag")
    if format_tag is not None and not isinstance(format_tag, str):
        raise ScenarioError(f"scenario {path}: expected.format_tag must be a string or null")
    if canonicalize_answer(answer, format_tag) != answer:
        raise ScenarioError(
            f"scenario {path}: expected.answer {answer!r} is not canonical for tag {format_tag!r}; "
            f"write it as {canonicalize_answer(answer, format_tag)!r}"
        )
    status = raw_expected.get("status", STATUS_FINISHED)
    if status not in STATUSES:
        raise ScenarioError(f"scenario {path}: expected.status must be one of {STATUSES}")
    event_kinds = tuple(raw_expected.get("event_kinds", ()))
    expected = ExpectedOutcome(answer=answer, format_tag=format_tag, status=status, event_kinds=event_kinds)

    corpus = data.get("search_corpus")
    if isinstance(corpus, str):
        corpus_path = base_dir / corpus
        try:
            corpus = json.loads(corpus_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"scenario {path}: cannot load search corpus: {exc}") from exc
    if corpus is not None and not isinstance(corpus, list):
        raise ScenarioError(f"scenario {path}: search_corpus must be a list (or a path to one)")

    files_root = data.get("files_root")
    if files_root is not None:
        files_root = Path(files_root)
        if not files_root.is_absolute():
            files_root = base_dir / files_root

    injections = [parse_fault_injection(raw, i) for i, raw in enumerate(data.get("injected_faults", []))]

    judge = data.get("judge_backend")
    if judge is not None and judge not in profile_ids:
        raise ScenarioError(f"scenario {path}: judge_backend {judge!r} is not a declared profile")

    return ScenarioSpec(
        name=str(data["name"]),
        query=str(data["query"]),
        graph=graph,
        backend_profiles=profiles,
        expected=expected,
        base_dir=base_dir,
        tool_manifest=data.get("tool_manifest"),
        search_corpus=corpus,
        files_root=files_root,
        builtin_tools=bool(data.get("builtin_tools", True)),
        injected_faults=injections,
        judge_backend=judge,
        seed=int(data.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# Environment assembly
# ---------------------------------------------------------------------------


def build_scenario_env(spec: ScenarioSpec, *, deterministic: bool = True) -> RunEnv:
    """Construct a fresh, fully armed environment for one scenario run."""
    registry = ToolRegistry()
    if spec.builtin_tools:
        register_builtin_stubs(registry, files_root=spec.files_root, search_corpus=spec.search_corpus)
    if spec.tool_manifest is not None:
        load_tool_manifest(registry, spec.tool_manifest, base_dir=spec.base_dir)

    backend_faults: dict[str, list[FaultInjection]] = {}
    tool_faults: dict[str, list[FaultInjection]] = {}
    for injection in spec.injected_faults:
        kind, _, name = injection.target.partition(":")
        bucket = backend_faults if kind == "backend" else tool_faults
        bucket.setdefault(name, []).append(injection)

    backends: dict[str, Any] = {}
    profiles: dict[str, BackendProfile] = {}
    for profile in spec.backend_profiles:
        backend = build_backend(profile, base_dir=spec.base_dir)
        wrapped = backend_faults.get(profile.id)
        backends[profile.id] = InjectingBackend(backend, wrapped) if wrapped else backend
        profiles[profile.id] = profile

    unknown_backends = sorted(set(backend_faults) - set(profiles))
    if unknown_backends:
        raise ScenarioError(f"injected faults target unknown backends {unknown_backends}")
    for tool_id, injections in tool_faults.items():
        if tool_id not in registry:
            raise ScenarioError(f"injected faults target unknown tool {tool_id!r}")
        registry.replace_impl(tool_id, lambda inner, inj=injections: _InjectedToolImpl(inner, inj))

    return RunEnv(
        graph=spec.graph,
        backends=backends,
        registry=registry,
        log=EventLog(),
        retry=RetryPolicy(deterministic_mode=deterministic),
        deterministic=deterministic,
        backend_profiles=profiles,
    )


# ---------------------------------------------------------------------------
# Grading
# ---------------------------------------------------------------------------


def evaluate_answer(
    actual: str,
    expected: str,
    format_tag: str | None = None,
    judge: Any = None,
) -> tuple[bool, str]:
    """Grade an answer: canonical equality first, the judge backend second.

    Returns ``(accepted, method)`` where method is one of ``exact``,
    ``judge-accepted``, ``judge-rejected``, ``judge-unavailable``, or
    ``mismatch``.  The judge gets a single call, no retries.
    """
    if canonicalize_answer(actual, format_tag) == canonicalize_answer(expected, format_tag):
        return True, "exact"
    if judge is None:
        return False, "mismatch"
    request = ChatRequest(
        messages=(
            Message(role="system", content=load_prompt("judge")),
            Message(role="user", content=f"Expected answer:\n{expected}\n\nCandidate answer:\n{actual}"),
        ),
        node_id="judge",
    )
    try:
        response = judge.complete(request)
    except BackendFailure as exc:
        return False, f"judge-unavailable: {exc.detail}"
    first_line = next((line.strip() for line in response.message.content.splitlines() if line.strip()), "")
    if first_line == "ACCEPT":
        return True, "judge-accepted"
    return False, "judge-rejected"


# ---------------------------------------------------------------------------
# Scenario execution
# ---------------------------------------------------------------------------


@dataclass
class ScenarioReport:
    name: str
    passed: bool
    reps: int
    answer: str
    expected_answer: str
    method: str
    status: str
    expected_status: str
    log_digest: str
    kind_counts: dict[str, int]
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "reps": self.reps,
            "answer": self.answer,
            "expected_answer": self.expected_answer,
            "method": self.method,
            "status": self.status,
            "expected_status": self.expected_status,
            "log_digest": self.log_digest,
            "kind_counts": self.kind_counts,
            "failures": list(self.failures),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioReport":
        return cls(
            name=str(data["name"]),
            passed=bool(data["passed"]),
            reps=int(data.get("reps", 1)),
            answer=str(data.get("answer", "")),
            expected_answer=str(data.get("expected_answer", "")),
            method=str(data.get("method", "")),
            status=str(data.get("status", "")),
            expected_status=str(data.get("expected_status", "")),
            log_digest=str(data.get("log_digest", "")),
            kind_counts=dict(data.get("kind_counts", {})),
            failures=list(data.get("failures", [])),
        )


def run_scenario(
    spec: ScenarioSpec,
    *,
    reps: int = 1,
    runs_root: str | Path | None = None,
    deterministic: bool = True,
) -> ScenarioReport:
    """Run a scenario *reps* times and grade the outcome.

    Every repetition gets a fresh environment (fresh scripted counters,
    fresh injections).  Repetitions must agree on the canonical answer and
    on the volatile-stripped event-log digest; any divergence is reported
    as a failure.  With *runs_root* set, each repetition persists a full
    run directory (manifest, events, checkpoints, result).
    """
    reps = max(1, reps)
    answers: list[str] = []
    digests: list[str] = []
    statuses: list[str] = []
    counts: list[dict[str, int]] = []
    raw_answers: list[str] = []

    for rep in range(reps):
        env = build_scenario_env(spec, deterministic=deterministic)
        store = None
        if runs_root is not None:
            store = RunStore(runs_root, f"{spec.name}-rep{rep + 1}")
        run_id = f"{spec.name}-rep{rep + 1}-{uuid.uuid4().hex[:8]}"
        status = STATUS_FINISHED
        try:
            answer = execute_task(spec.graph, spec.query, env, store, run_id=run_id, seed=spec.seed)
        except WallClockExceeded as exc:
            answer = exc.partial
            status = STATUS_BUDGET_STOP
        if store is not None:
            recorded = store.read_result()
            if recorded is not None:
                status = str(recorded.get("status", status))
        elif status == STATUS_FINISHED:
            early = next((w for w in answer.warnings if w.startswith("run stopped early: ")), None)
            if early is not None:
                status = early.removeprefix("run stopped early: ")
        raw_answers.append(answer.final_answer)
        answers.append(canonicalize_answer(answer.final_answer, spec.expected.format_tag))
        digests.append(env.log.digest())
        statuses.append(status)
        counts.append(env.log.kind_counts())

    failures: list[str] = []
    if len(set(answers)) > 1:
        failures.append(f"repetitions disagree on the answer: {sorted(set(answers))}")
    if len(set(digests)) > 1:
        failures.append("repetitions disagree on the event-log digest")

    judge = None
    if spec.judge_backend is not None:
        judge_profile = next(p for p in spec.backend_profiles if p.id == spec.judge_backend)
        judge = build_backend(judge_profile, base_dir=spec.base_dir)
    accepted, method = evaluate_answer(raw_answers[0], spec.expected.answer, spec.expected.format_tag, judge)
    if not accepted:
        failures.append(
            f"answer mismatch ({method}): expected {spec.expected.answer!r}, got {answers[0]!r}"
        )
    if statuses[0] != spec.expected.status:
        failures.append(f"status mismatch: expected {spec.expected.status!r}, got {statuses[0]!r}")
    missing_kinds = [kind for kind in spec.expected.event_kinds if counts[0].get(kind, 0) == 0]
    if missing_kinds:
        failures.append(f"expected event kinds never occurred: {missing_kinds}")

    return ScenarioReport(
        name=spec.name,
        passed=not failures,
        reps=reps,
        answer=answers[0],
        expected_answer=spec.expected.answer,
        method=method,
        status=statuses[0],
        expected_status=spec.expected.status,
        log_digest=digests[0],
        kind_counts=counts[0],
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def render_summary_lines(reports: list[ScenarioReport]) -> list[str]:
    lines = []
    for report in reports:
        verdict = "PASS" if report.passed else "FAIL"
        lines.append(f"{verdict} {report.name} — answer {report.answer!r} ({report.method}), status {report.status}")
        for failure in report.failures:
            lines.append(f"     - {failure}")
    passed = sum(1 for r in reports if r.passed)
    total = len(reports)
    rate = (100.0 * passed / total) if total else 0.0
    lines.append(f"{passed}/{total} scenarios passed ({rate:.1f}%)")
    return lines


def report_summary(reports: list[ScenarioReport], out_path: str | Path) -> dict[str, Any]:
    """Write the machine-readable summary (and a human-readable sibling).

    ``<out>.txt`` gets one verdict line per scenario plus the pass rate.
    Returns the summary dict.
    """
    out_path = Path(out_path)
    passed = sum(1 for r in reports if r.passed)
    summary = {
        "total": len(reports),
        "passed": passed,
        "failed": len(reports) - passed,
        "pass_rate": (passed / len(reports)) if reports else 0.0,
        "scenarios": [r.to_dict() for r in reports],
    }
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        out_path.with_suffix(out_path.suffix + ".txt").write_text(
            "\n".join(render_summary_lines(reports)) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise StorageError(f"cannot write summary {out_path}: {exc}") from exc
    return summary
