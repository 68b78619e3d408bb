"""Tool contracts, the XML call grammar, fault isolation, and the registry.

A model asks for a tool with exactly one block of the form::

    <use_mcp_tool>
    <server_name>server name here</server_name>
    <tool_name>tool name here</tool_name>
    <arguments>{"param": "value"}</arguments>
    </use_mcp_tool>

Parsing is strict (tags in order, arguments valid JSON, one call per turn)
and every execution failure is isolated into a typed, bounded
:class:`FaultArtifact` rather than an exception — nothing a tool does can
crash the agent loop.
"""
from __future__ import annotations

import json
import logging
import re
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeoutError
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .backend import BackendFailure, FailureClass, RetryPolicy, classify_failure
from .events import EventLog, canonical_json, sha256_hex

logger = logging.getLogger(__name__)

ARGUMENT_TYPES = ("string", "integer", "number", "boolean", "list", "object")

FAULT_TYPES = (
    "invalid-arguments",
    "malformed-call",
    "tool-unavailable",
    "transient-failure",
    "permanent-failure",
    "budget-exceeded",
)

MAX_SUMMARY_CHARS = 2000
DEFAULT_TOOL_TIMEOUT = 30.0

# Failure classes that make trying the same tool again worthwhile.
_TRANSIENT_CLASSES = frozenset(
    {FailureClass.TRANSIENT_NETWORK, FailureClass.RATE_LIMIT, FailureClass.TIMEOUT, FailureClass.MALFORMED_RESPONSE}
)


class MalformedCall(Exception):
    """The text contains a tool block that does not follow the grammar."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class MultipleCalls(Exception):
    """More than one well-formed tool block in a single turn."""

    def __init__(self, count: int):
        self.count = count
        super().__init__(f"{count} tool calls in one turn; exactly one is allowed")


class DuplicateToolError(Exception):
    def __init__(self, tool_id: str):
        self.tool_id = tool_id
        super().__init__(f"tool already registered: {tool_id}")


class UnknownToolError(Exception):
    def __init__(self, tool_id: str):
        self.tool_id = tool_id
        super().__init__(f"no such tool: {tool_id}")


class ToolManifestError(Exception):
    """A tool manifest file does not follow the expected format."""


class ToolFault(Exception):
    """Raised by tool implementations to signal a typed failure."""

    def __init__(self, fault_type: str, detail: str):
        if fault_type not in FAULT_TYPES:
            raise ValueError(f"unknown fault type: {fault_type!r}")
        self.fault_type = fault_type
        self.detail = detail
        super().__init__(f"[{fault_type}] {detail}")


@dataclass(frozen=True)
class ArgumentField:
    name: str
    type: str = "string"
    required: bool = True

    def __post_init__(self) -> None:
        if self.type not in ARGUMENT_TYPES:
            raise ValueError(f"unknown argument type: {self.type!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "type": self.type, "required": self.required}


@dataclass(frozen=True)
class ToolContract:
    """What a tool is called, what it takes, and where to fall back."""

    server_name: str
    tool_name: str
    description: str = ""
    input_schema: tuple[ArgumentField, ...] = ()
    fallbacks: tuple[str, ...] = ()  # tool ids, tried in declaration order

    @property
    def tool_id(self) -> str:
        return f"{self.server_name}/{self.tool_name}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "server_name": self.server_name,
            "tool_name": self.tool_name,
            "description": self.description,
            "input_schema": [f.to_dict() for f in self.input_schema],
            "fallbacks": list(self.fallbacks),
        }


@dataclass
class ToolInvocation:
    """A parsed tool call.  ``raw_text`` round-trips but does not compare."""

    server_name: str
    tool_name: str
    arguments: dict[str, Any]
    raw_text: str = field(default="", compare=False)

    @property
    def tool_id(self) -> str:
        return f"{self.server_name}/{self.tool_name}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "server_name": self.server_name,
            "tool_name": self.tool_name,
            "arguments": self.arguments,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToolInvocation":
        return cls(
            server_name=str(data["server_name"]),
            tool_name=str(data["tool_name"]),
            arguments=dict(data["arguments"]),
            raw_text=str(data.get("raw_text", "")),
        )


@dataclass(frozen=True)
class FaultArtifact:
    """A failure, summarized for the model: typed, bounded, with a remedy."""

    fault_type: str
    summary: str
    context: str = ""

    def __post_init__(self) -> None:
        if self.fault_type not in FAULT_TYPES:
            raise ValueError(f"unknown fault type: {self.fault_type!r}")
        if not self.summary.strip():
            raise ValueError("fault summary must be non-empty")
        if len(self.summary) > MAX_SUMMARY_CHARS:
            raise ValueError(f"fault summary exceeds {MAX_SUMMARY_CHARS} chars")

    def to_dict(self) -> dict[str, Any]:
        return {"fault_type": self.fault_type, "summary": self.summary, "context": self.context}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FaultArtifact":
        return cls(
            fault_type=str(data["fault_type"]),
            summary=str(data["summary"]),
            context=str(data.get("context", "")),
        )


@dataclass(frozen=True)
class ToolOutcome:
    """Result of one invocation: a text payload or a fault artifact."""

    status: str  # "ok" | "fault"
    payload: str = ""
    fault: FaultArtifact | None = None
    duration: float = 0.0

    @classmethod
    def success(cls, payload: str, duration: float = 0.0) -> "ToolOutcome":
        return cls(status="ok", payload=payload, duration=duration)

    @classmethod
    def from_fault(cls, fault: FaultArtifact, duration: float = 0.0) -> "ToolOutcome":
        return cls(status="fault", fault=fault, duration=duration)

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "payload": self.payload,
            "fault": self.fault.to_dict() if self.fault else None,
            "duration": self.duration,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ToolOutcome":
        fault = data.get("fault")
        return cls(
            status=str(data["status"]),
            payload=str(data.get("payload", "")),
            fault=FaultArtifact.from_dict(fault) if fault else None,
            duration=float(data.get("duration", 0.0)),
        )


# ---------------------------------------------------------------------------
# Call grammar
# ---------------------------------------------------------------------------

_OPEN_TAG = "<use_mcp_tool>"
_CLOSE_TAG = "</use_mcp_tool>"

_BLOCK_RE = re.compile(
    r"<use_mcp_tool>\s*"
    r"<server_name>(.*?)</server_name>\s*"
    r"<tool_name>(.*?)</tool_name>\s*"
    r"<arguments>(.*?)</arguments>\s*"
    r"</use_mcp_tool>",
    re.DOTALL,
)


def parse_tool_call(text: str) -> ToolInvocation | None:
    """Parse at most one tool call out of a model reply.

    Returns ``None`` when the text contains no tool block at all.  Raises
    :class:`MalformedCall` when a block is structurally broken (missing or
    out-of-order tags, missing closing tag, bad argument JSON) and
    :class:`MultipleCalls` when more than one well-formed block appears.
    """
    matches: list[re.Match[str]] = []
    pos = 0
    while True:
        start = text.find(_OPEN_TAG, pos)
        if start < 0:
            break
        match = _BLOCK_RE.match(text, start)
        if match is None:
            rest = text[start:]
            if _CLOSE_TAG not in rest:
                raise MalformedCall(f"tool block is missing its closing {_CLOSE_TAG} tag")
            raise MalformedCall(
                "tool block tags are malformed or out of order "
                "(expected server_name, tool_name, arguments, in that order)"
            )
        matches.append(match)
        pos = match.end()
    if not matches:
        return None
    if len(matches) > 1:
        raise MultipleCalls(len(matches))

    match = matches[0]
    server_name = match.group(1).strip()
    tool_name = match.group(2).strip()
    arg_text = match.group(3).strip()
    if not server_name:
        raise MalformedCall("server_name is empty")
    if not tool_name:
        raise MalformedCall("tool_name is empty")
    try:
        arguments = json.loads(arg_text) if arg_text else {}
    except json.JSONDecodeError as exc:
        raise MalformedCall(f"tool arguments are not valid JSON: {exc.msg} (char {exc.pos})") from exc
    if not isinstance(arguments, dict):
        raise MalformedCall("tool arguments must be a JSON object")
    return ToolInvocation(
        server_name=server_name,
        tool_name=tool_name,
        arguments=arguments,
        raw_text=match.group(0),
    )


def format_tool_call(server_name: str, tool_name: str, arguments: dict[str, Any]) -> str:
    """Render a canonical tool block; ``parse_tool_call`` round-trips it."""
    return (
        f"{_OPEN_TAG}\n"
        f"<server_name>{server_name}</server_name>\n"
        f"<tool_name>{tool_name}</tool_name>\n"
        f"<arguments>\n{json.dumps(arguments, indent=2, sort_keys=True, ensure_ascii=False)}\n</arguments>\n"
        f"{_CLOSE_TAG}"
    )


# ---------------------------------------------------------------------------
# Argument validation
# ---------------------------------------------------------------------------

_TYPE_CHECKS: dict[str, Callable[[Any], bool]] = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
    "object": lambda v: isinstance(v, dict),
}


def validate_arguments(contract: ToolContract, arguments: dict[str, Any]) -> FaultArtifact | None:
    """Check arguments against the contract; ``None`` means they pass.

    The artifact names every offending field: missing required fields,
    wrong types, and fields the contract does not declare.
    """
    problems: list[str] = []
    declared = {f.name: f for f in contract.input_schema}
    for spec in contract.input_schema:
        if spec.name not in arguments:
            if spec.required:
                problems.append(f"missing required field {spec.name!r} ({spec.type})")
            continue
        value = arguments[spec.name]
        if not _TYPE_CHECKS[spec.type](value):
            problems.append(f"field {spec.name!r} must be {spec.type}, got {type(value).__name__}")
    for name in arguments:
        if name not in declared:
            problems.append(f"unexpected field {name!r}")
    if not problems:
        return None
    summary = (
        f"invalid arguments for {contract.tool_id}: "
        + "; ".join(problems)
        + ". Fix the call arguments to match the tool contract and retry."
    )
    return FaultArtifact(
        fault_type="invalid-arguments",
        summary=summary[:MAX_SUMMARY_CHARS],
        context=f"tool={contract.tool_id}",
    )


# ---------------------------------------------------------------------------
# Fault isolation
# ---------------------------------------------------------------------------


def _first_line(text: str) -> str:
    return text.strip().splitlines()[0] if text.strip() else ""


def isolate_fault(raw: Any, invocation: ToolInvocation | None = None) -> FaultArtifact:
    """Convert any raw failure into a typed, bounded artifact.

    Summaries are template-generated (never model-generated), name a
    remedy, and exclude stack traces.
    """
    context = ""
    if invocation is not None:
        args_digest = sha256_hex(canonical_json(invocation.arguments))[:8]
        context = f"tool={invocation.tool_id} args_digest={args_digest}"

    if isinstance(raw, FaultArtifact):
        return raw
    if isinstance(raw, MalformedCall):
        fault_type = "malformed-call"
        summary = f"tool call could not be parsed: {raw.reason}. Fix the call format and retry."
    elif isinstance(raw, MultipleCalls):
        fault_type = "malformed-call"
        summary = (
            f"{raw.count} tool calls were found in one turn; emit exactly one call per turn. "
            "Fix the call format and retry."
        )
    elif isinstance(raw, ToolFault):
        fault_type = raw.fault_type
        remedy = {
            "invalid-arguments": "Fix the call arguments to match the tool contract and retry.",
            "malformed-call": "Fix the call format and retry.",
            "tool-unavailable": "Use an alternative source or check the tool id.",
            "transient-failure": "Retry later.",
            "permanent-failure": "Use an alternative source.",
            "budget-exceeded": "Raise the relevant budget or finish with what is known.",
        }[raw.fault_type]
        summary = f"{_first_line(raw.detail)} {remedy}"
    elif isinstance(raw, (BackendFailure, FailureClass)) or isinstance(raw, BaseException):
        if isinstance(raw, FailureClass):
            failure_class, detail = raw, f"failure of class {raw.value}"
        elif isinstance(raw, BackendFailure):
            failure_class, detail = raw.failure_class, raw.detail
        else:
            failure_class, detail = classify_failure(raw), str(raw) or type(raw).__name__
        if failure_class in _TRANSIENT_CLASSES:
            fault_type = "transient-failure"
            summary = f"transient failure ({failure_class.value}): {_first_line(detail)}. Retry later."
        else:
            fault_type = "permanent-failure"
            summary = f"permanent failure: {_first_line(detail)}. Use an alternative source."
    else:
        fault_type = "permanent-failure"
        summary = f"permanent failure: {_first_line(str(raw))}. Use an alternative source."

    return FaultArtifact(fault_type=fault_type, summary=summary[:MAX_SUMMARY_CHARS], context=context)


# ---------------------------------------------------------------------------
# Registry and execution
# ---------------------------------------------------------------------------

ToolImpl = Callable[[dict[str, Any]], str]


@dataclass
class _Binding:
    contract: ToolContract
    impl: ToolImpl
    timeout: float = DEFAULT_TOOL_TIMEOUT


class ToolRegistry:
    """All invokable tools, keyed by ``server_name/tool_name``."""

    def __init__(self) -> None:
        self._bindings: dict[str, _Binding] = {}

    def register(self, contract: ToolContract, impl: ToolImpl, *, timeout: float = DEFAULT_TOOL_TIMEOUT) -> None:
        if contract.tool_id in self._bindings:
            raise DuplicateToolError(contract.tool_id)
        self._bindings[contract.tool_id] = _Binding(contract=contract, impl=impl, timeout=timeout)

    def lookup(self, tool_id: str) -> _Binding:
        try:
            return self._bindings[tool_id]
        except KeyError:
            raise UnknownToolError(tool_id) from None

    def __contains__(self, tool_id: str) -> bool:
        return tool_id in self._bindings

    def contracts(self) -> list[ToolContract]:
        return [b.contract for b in self._bindings.values()]

    def contracts_for(self, tool_ids: tuple[str, ...] | list[str]) -> list[ToolContract]:
        return [self._bindings[tid].contract for tid in tool_ids if tid in self._bindings]

    def replace_impl(self, tool_id: str, wrapper: Callable[[ToolImpl], ToolImpl]) -> None:
        """Swap a tool's implementation (fault-injection arming; pre-run only)."""
        binding = self.lookup(tool_id)
        binding.impl = wrapper(binding.impl)

    def state_dict(self) -> dict[str, Any]:
        """Collect mutable counters from stateful implementations."""
        out: dict[str, Any] = {}
        for tool_id, binding in self._bindings.items():
            state = getattr(binding.impl, "state", None)
            if callable(state):
                out[tool_id] = state()
        return out

    def restore_state(self, states: dict[str, Any]) -> None:
        for tool_id, state in states.items():
            if tool_id in self._bindings:
                restore = getattr(self._bindings[tool_id].impl, "restore", None)
                if callable(restore):
                    restore(state)


def _run_with_timeout(impl: ToolImpl, arguments: dict[str, Any], timeout: float) -> str:
    if timeout is None or timeout <= 0:
        return impl(arguments)
    executor = ThreadPoolExecutor(max_workers=1)
    try:
        future = executor.submit(impl, arguments)
        try:
            return future.result(timeout=timeout)
        except FutureTimeoutError:
            raise ToolFault("transient-failure", f"tool execution timed out after {timeout:g}s") from None
    finally:
        executor.shutdown(wait=False)


def invoke_tool(
    registry: ToolRegistry,
    invocation: ToolInvocation,
    *,
    retry: RetryPolicy | None = None,
    log: EventLog | None = None,
    node_id: str = "",
) -> ToolOutcome:
    """Execute a tool call with full isolation.

    Arguments are validated first (an argument fault is the caller's to
    fix, so fallbacks are not tried for it).  Execution failures are
    retried per policy when transient, then the contract's fallback chain
    is engaged in declaration order; the final failure is summarized into a
    fault outcome.  No exception ever crosses this boundary.
    """
    retry = retry or RetryPolicy()
    started = time.perf_counter()

    def done(outcome: ToolOutcome) -> ToolOutcome:
        return ToolOutcome(
            status=outcome.status,
            payload=outcome.payload,
            fault=outcome.fault,
            duration=time.perf_counter() - started,
        )

    try:
        binding = registry.lookup(invocation.tool_id)
    except UnknownToolError:
        artifact = FaultArtifact(
            fault_type="tool-unavailable",
            summary=(
                f"tool {invocation.tool_id} is not registered. "
                "Use an alternative source or check the tool id."
            ),
            context=f"tool={invocation.tool_id}",
        )
        if log is not None:
            log.emit("fault", node_id, {"artifact": artifact.to_dict()})
        return done(ToolOutcome.from_fault(artifact))

    chain: list[_Binding] = [binding]
    for fallback_id in binding.contract.fallbacks:
        if fallback_id in registry:
            chain.append(registry.lookup(fallback_id))
        else:
            logger.warning("fallback %s of %s is not registered; skipping", fallback_id, invocation.tool_id)

    artifact = validate_arguments(binding.contract, invocation.arguments)
    if artifact is not None:
        if log is not None:
            log.emit("fault", node_id, {"artifact": artifact.to_dict()})
        return done(ToolOutcome.from_fault(artifact))

    last_artifact: FaultArtifact | None = None
    for chain_index, candidate in enumerate(chain):
        if chain_index > 0:
            if log is not None:
                log.emit(
                    "fallback",
                    node_id,
                    {"from": chain[chain_index - 1].contract.tool_id, "to": candidate.contract.tool_id},
                )
            # Fallback contracts are schema-compatible by declaration, but
            # verify anyway so a misdeclared chain fails loudly in the artifact.
            artifact = validate_arguments(candidate.contract, invocation.arguments)
            if artifact is not None:
                last_artifact = artifact
                continue
        for attempt in range(1, retry.max_attempts + 1):
            try:
                payload = _run_with_timeout(candidate.impl, invocation.arguments, candidate.timeout)
                if log is not None:
                    log.emit(
                        "tool-attempt",
                        node_id,
                        {"tool": candidate.contract.tool_id, "attempt": attempt, "ok": True},
                    )
                return done(ToolOutcome.success(payload if isinstance(payload, str) else str(payload)))
            except Exception as exc:  # noqa: BLE001 - isolation boundary
                last_artifact = isolate_fault(exc, invocation)
                if log is not None:
                    log.emit(
                        "tool-attempt",
                        node_id,
                        {
                            "tool": candidate.contract.tool_id,
                            "attempt": attempt,
                            "ok": False,
                            "fault_type": last_artifact.fault_type,
                        },
                    )
                retryable = last_artifact.fault_type == "transient-failure"
                if not retryable:
                    break  # permanent for this tool; move down the chain

    final = last_artifact or FaultArtifact(
        fault_type="permanent-failure",
        summary=f"tool {invocation.tool_id} produced no result. Use an alternative source.",
        context=f"tool={invocation.tool_id}",
    )
    if log is not None:
        log.emit("fault", node_id, {"artifact": final.to_dict()})
    return done(ToolOutcome.from_fault(final))


# ---------------------------------------------------------------------------
# Builtin stub tools
# ---------------------------------------------------------------------------


def _search_corpus_impl(corpus: list[dict[str, Any]]) -> ToolImpl:
    def search(arguments: dict[str, Any]) -> str:
        query = str(arguments.get("query", "")).lower()
        hits = []
        for entry in corpus:
            keywords = [str(k).lower() for k in entry.get("keywords", [])]
            if keywords and all(k in query for k in keywords):
                hits.append(str(entry.get("result", "")))
        if not hits:
            return f"no results found for: {query}"
        return "\n".join(hits)

    return search


def _safe_eval(expression: str) -> float | int:
    import ast

    allowed_binops = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod, ast.Pow)
    try:
        tree = ast.parse(expression, mode="eval")
    except SyntaxError as exc:
        raise ToolFault("invalid-arguments", f"expression is not valid arithmetic: {exc.msg}") from exc

    def walk(node: Any) -> float | int:
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return node.value
        if isinstance(node, ast.BinOp) and isinstance(node.op, allowed_binops):
            left, right = walk(node.left), walk(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if isinstance(node.op, ast.Div):
                return left / right
            if isinstance(node.op, ast.FloorDiv):
                return left // right
            if isinstance(node.op, ast.Mod):
                return left % right
            return left**right
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
            value = walk(node.operand)
            return value if isinstance(node.op, ast.UAdd) else -value
        raise ToolFault("invalid-arguments", "expression uses an unsupported construct; only arithmetic is allowed")

    return walk(tree)


def register_builtin_stubs(
    registry: ToolRegistry,
    *,
    files_root: str | Path | None = None,
    search_corpus: list[dict[str, Any]] | None = None,
) -> None:
    """Register the five builtin stub tools.

    * ``tool-echo/echo`` — returns its ``text`` argument.
    * ``tool-searching/search_primary`` — keyword search over a corpus,
      with ``tool-searching/search_backup`` declared as its fallback.
    * ``tool-searching/search_backup`` — same search, independent binding.
    * ``tool-files/read_file`` — reads files under a sandbox root.
    * ``tool-calc/evaluate`` — safe arithmetic evaluation.
    """
    corpus = search_corpus or []
    root = Path(files_root) if files_root is not None else None

    registry.register(
        ToolContract(
            server_name="tool-echo",
            tool_name="echo",
            description="Echo the given text back unchanged.",
            input_schema=(ArgumentField("text", "string"),),
        ),
        lambda arguments: str(arguments["text"]),
    )

    search_impl = _search_corpus_impl(corpus)
    registry.register(
        ToolContract(
            server_name="tool-searching",
            tool_name="search_primary",
            description="Search the indexed corpus for documents matching the query.",
            input_schema=(ArgumentField("query", "string"),),
            fallbacks=("tool-searching/search_backup",),
        ),
        search_impl,
    )
    registry.register(
        ToolContract(
            server_name="tool-searching",
            tool_name="search_backup",
            description="Backup search engine over the same corpus.",
            input_schema=(ArgumentField("query", "string"),),
        ),
        search_impl,
    )

    def read_file(arguments: dict[str, Any]) -> str:
        rel = str(arguments["path"])
        if root is None:
            raise ToolFault("tool-unavailable", "no file sandbox is configured for this run")
        target = (root / rel).resolve()
        if not str(target).startswith(str(root.resolve())):
            raise ToolFault("invalid-arguments", f"path {rel!r} escapes the sandbox root")
        if not target.is_file():
            # A missing file is an argument-level fault: the caller must
            # provide (or first upload) a path that exists.
            raise ToolFault(
                "invalid-arguments",
                f"can't open file {rel!r}: no such file in the sandbox; provide an existing (uploaded) path",
            )
        return target.read_text(encoding="utf-8")

    registry.register(
        ToolContract(
            server_name="tool-files",
            tool_name="read_file",
            description="Read a text file from the run's file sandbox.",
            input_schema=(ArgumentField("path", "string"),),
        ),
        read_file,
    )

    def evaluate(arguments: dict[str, Any]) -> str:
        value = _safe_eval(str(arguments["expression"]))
        if isinstance(value, float) and value.is_integer():
            return str(int(value))
        return repr(value) if isinstance(value, float) else str(value)

    registry.register(
        ToolContract(
            server_name="tool-calc",
            tool_name="evaluate",
            description="Evaluate a plain arithmetic expression.",
            input_schema=(ArgumentField("expression", "string"),),
        ),
        evaluate,
    )


# ---------------------------------------------------------------------------
# Scripted tools and manifests (scenario fixtures)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolScriptRule:
    """Scripted-tool rule: matched against the JSON-serialized arguments."""

    matcher_kind: str  # substring | exact | regex
    pattern: str
    payload: str = ""
    fail_count: int = 0
    fail_type: str = "transient-failure"


class ScriptedTool:
    """Rule-driven tool implementation with checkpointable fail counters."""

    def __init__(self, rules: list[ToolScriptRule]):
        self.rules = list(rules)
        self._lock = threading.Lock()
        self._remaining = [rule.fail_count for rule in self.rules]

    def state(self) -> dict[str, Any]:
        with self._lock:
            return {"remaining": list(self._remaining)}

    def restore(self, state: dict[str, Any]) -> None:
        with self._lock:
            remaining = list(state.get("remaining", []))
            if len(remaining) != len(self.rules):
                raise ValueError("scripted tool state does not match its rules")
            self._remaining = [int(v) for v in remaining]

    def __call__(self, arguments: dict[str, Any]) -> str:
        text = canonical_json(arguments)
        with self._lock:
            for index, rule in enumerate(self.rules):
                if rule.matcher_kind == "substring":
                    hit = rule.pattern in text
                elif rule.matcher_kind == "exact":
                    hit = rule.pattern == text
                else:
                    hit = re.search(rule.pattern, text, re.DOTALL) is not None
                if not hit:
                    continue
                if self._remaining[index] > 0:
                    self._remaining[index] -= 1
                    raise ToolFault(rule.fail_type, f"scripted tool failure injected by rule {index}")
                return rule.payload
        raise ToolFault("permanent-failure", "no scripted rule matched the arguments")


def _parse_tool_rule(raw: Any, where: str) -> ToolScriptRule:
    if not isinstance(raw, dict):
        raise ToolManifestError(f"{where}: each rule must be an object")
    match = raw.get("match")
    if not isinstance(match, dict) or len(match) != 1:
        raise ToolManifestError(f"{where}: 'match' must hold exactly one matcher")
    kind, pattern = next(iter(match.items()))
    if kind not in ("substring", "exact", "regex") or not isinstance(pattern, str):
        raise ToolManifestError(f"{where}: bad matcher {kind!r}")
    fail_type = raw.get("fail_type", "transient-failure")
    if fail_type not in FAULT_TYPES:
        raise ToolManifestError(f"{where}: unknown fail_type {fail_type!r}")
    fail_count = raw.get("fail_count", 0)
    if isinstance(fail_count, bool) or not isinstance(fail_count, int) or fail_count < 0:
        raise ToolManifestError(f"{where}: 'fail_count' must be a nonnegative integer")
    payload = raw.get("payload", "")
    if not isinstance(payload, str):
        raise ToolManifestError(f"{where}: 'payload' must be a string")
    return ToolScriptRule(
        matcher_kind=kind, pattern=pattern, payload=payload, fail_count=fail_count, fail_type=fail_type
    )


def load_tool_manifest(registry: ToolRegistry, manifest: dict[str, Any] | str | Path, *, base_dir: str | Path | None = None) -> None:
    """Register scripted tools described by a JSON manifest.

    Manifest shape: ``{"tools": [{server_name, tool_name, description,
    input_schema: [{name, type, required}], fallbacks: [...], timeout,
    rules: [...]}, ...]}``.
    """
    if not isinstance(manifest, dict):
        path = Path(manifest)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ToolManifestError(f"cannot load tool manifest {path}: {exc}") from exc
    tools = manifest.get("tools")
    if not isinstance(tools, list):
        raise ToolManifestError("tool manifest must contain a 'tools' list")
    for index, raw in enumerate(tools):
        where = f"tools[{index}]"
        if not isinstance(raw, dict):
            raise ToolManifestError(f"{where}: must be an object")
        try:
            schema = tuple(
                ArgumentField(
                    name=str(f["name"]),
                    type=str(f.get("type", "string")),
                    required=bool(f.get("required", True)),
                )
                for f in raw.get("input_schema", [])
            )
            contract = ToolContract(
                server_name=str(raw["server_name"]),
                tool_name=str(raw["tool_name"]),
                description=str(raw.get("description", "")),
                input_schema=schema,
                fallbacks=tuple(raw.get("fallbacks", ())),
            )
        except (KeyError, ValueError) as exc:
            raise ToolManifestError(f"{where}: {exc}") from exc
        rules = [_parse_tool_rule(r, f"{where}.rules[{i}]") for i, r in enumerate(raw.get("rules", []))]
        timeout = raw.get("timeout", DEFAULT_TOOL_TIMEOUT)
        registry.register(contract, ScriptedTool(rules), timeout=float(timeout))


# ---------------------------------------------------------------------------
# Subprocess adapter
# ---------------------------------------------------------------------------


class SubprocessTool:
    """Adapter running an external command per invocation.

    Protocol: one JSON line with the arguments on stdin; one JSON line on
    stdout, either ``{"status": "ok", "payload": "..."}`` or
    ``{"status": "fault", "fault_type": "...", "detail": "..."}``.
    """

    def __init__(self, command: list[str], timeout: float = DEFAULT_TOOL_TIMEOUT):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, arguments: dict[str, Any]) -> str:
        try:
            proc = subprocess.run(
                self.command,
                input=json.dumps(arguments) + "\n",
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except subprocess.TimeoutExpired:
            raise ToolFault("transient-failure", f"subprocess tool timed out after {self.timeout:g}s") from None
        if proc.returncode != 0:
            detail = _first_line(proc.stderr) or f"exit code {proc.returncode}"
            raise ToolFault("permanent-failure", f"subprocess tool failed: {detail}")
        line = proc.stdout.strip().splitlines()
        if not line:
            raise ToolFault("permanent-failure", "subprocess tool produced no output")
        try:
            result = json.loads(line[-1])
        except json.JSONDecodeError as exc:
            raise ToolFault("permanent-failure", f"subprocess tool output is not JSON: {exc.msg}") from exc
        if not isinstance(result, dict) or "status" not in result:
            raise ToolFault("permanent-failure", "subprocess tool output must be a JSON object with 'status'")
        if result["status"] == "ok":
            return str(result.get("payload", ""))
        raise ToolFault(
            str(result.get("fault_type", "permanent-failure")),
            str(result.get("detail", "subprocess tool reported a fault")),
        )
