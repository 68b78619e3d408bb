"""The agent execution loop: turns, tool calls, delegation, turn limits.

Each turn sends the node's prompt plus its own transcript to the node's
backend, parses the reply into exactly one of ToolCall / Delegate / Final /
Malformed, executes any requested action, and records a
:class:`TurnRecord`.  Sub-agents run in fresh isolated states and surface
back to the parent only as a single tool-style observation — a child's
transcript never leaks into the parent's context.
"""
from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .backend import ChatRequest, NonretryableFailure, RetriesExhausted, RetryPolicy, with_retry
from .events import EventLog, canonical_json, sha256_hex
from .graph import AgentGraphSpec, AgentNodeSpec
from .messages import Message, TurnRecord, extract_boxed_answer
from .tools import (
    FaultArtifact,
    MalformedCall,
    MultipleCalls,
    ToolInvocation,
    ToolOutcome,
    ToolRegistry,
    invoke_tool,
    isolate_fault,
    parse_tool_call,
)

logger = logging.getLogger(__name__)

DELEGATION_SERVER_PREFIX = "agent-"
DELEGATION_TOOL_NAME = "delegate"
DEFAULT_DELEGATION_DEPTH_LIMIT = 3

_FINAL_RE = re.compile(r"^\s*FINAL:\s*(.*?)\s*$", re.MULTILINE)

STATUS_RUNNING = "running"
STATUS_FINISHED = "finished"
STATUS_TURN_LIMIT = "turn-limit"
STATUS_BUDGET_STOP = "budget-stop"


class UnknownBackendError(Exception):
    def __init__(self, backend_id: str, node_id: str):
        self.backend_id = backend_id
        self.node_id = node_id
        super().__init__(f"node {node_id!r} names backend {backend_id!r}, which is not configured")


@dataclass
class AgentState:
    """Mutable execution state of one agent node."""

    node: AgentNodeSpec
    task: str
    transcript: list[TurnRecord] = field(default_factory=list)
    status: str = STATUS_RUNNING
    depth: int = 0
    final_text: str = ""

    @property
    def turns_used(self) -> int:
        return len(self.transcript)

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node.id,
            "task": self.task,
            "transcript": [r.to_dict() for r in self.transcript],
            "status": self.status,
            "depth": self.depth,
            "final_text": self.final_text,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], graph: AgentGraphSpec) -> "AgentState":
        node_id = str(data["node_id"])
        if node_id not in graph.nodes:
            raise KeyError(f"state references node {node_id!r} missing from the graph")
        return cls(
            node=graph.nodes[node_id],
            task=str(data["task"]),
            transcript=[TurnRecord.from_dict(r) for r in data.get("transcript", [])],
            status=str(data.get("status", STATUS_RUNNING)),
            depth=int(data.get("depth", 0)),
            final_text=str(data.get("final_text", "")),
        )


@dataclass(frozen=True)
class DelegationRequest:
    parent: str
    child: str
    subtask: str
    depth: int


# --- Turn outcomes ---------------------------------------------------------


@dataclass(frozen=True)
class ToolCallOutcome:
    invocation: ToolInvocation


@dataclass(frozen=True)
class DelegateOutcome:
    request: DelegationRequest
    invocation: ToolInvocation


@dataclass(frozen=True)
class FinalOutcome:
    text: str


@dataclass(frozen=True)
class MalformedOutcome:
    artifact: FaultArtifact


TurnOutcome = ToolCallOutcome | DelegateOutcome | FinalOutcome | MalformedOutcome


class _NullBudget:
    """No-op budget used when the runtime runs without a controller."""

    def try_consume_spawn(self, node_id: str = "") -> bool:
        return True

    def try_consume_round(self, node_id: str = "") -> bool:
        return True

    def wall_exceeded(self) -> bool:
        return False


@dataclass
class RunEnv:
    """Everything a running agent needs, bundled for plumb-through."""

    graph: AgentGraphSpec
    backends: dict[str, Any]
    registry: ToolRegistry
    log: EventLog = field(default_factory=EventLog)
    budgets: Any = field(default_factory=_NullBudget)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    tool_retry: RetryPolicy | None = None
    deterministic: bool = False
    depth_limit: int = DEFAULT_DELEGATION_DEPTH_LIMIT
    heavy_parallelism: int = 4
    # Heavy-aware dispatcher installed by the controller; signature
    # (node, task, env, depth) -> (final_text, AgentState | None).
    node_runner: Callable[[AgentNodeSpec, str, "RunEnv", int], tuple[str, "AgentState | None"]] | None = None
    on_turn: Callable[[AgentState], None] | None = None
    shared_states: dict[str, AgentState] = field(default_factory=dict)
    backend_profiles: dict[str, Any] = field(default_factory=dict)

    def backend_for(self, node: AgentNodeSpec) -> Any:
        backend = self.backends.get(node.backend)
        if backend is None:
            raise UnknownBackendError(node.backend, node.id)
        return backend


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------


def render_system_prompt(node: AgentNodeSpec, env: RunEnv) -> str:
    """Compose the node's full system prompt: role text, tools, delegation."""
    parts = [node.prompt.rstrip()]

    contracts = env.registry.contracts_for(node.tools)
    if contracts:
        tool_lines = []
        for contract in contracts:
            args = ", ".join(
                f"{f.name} ({f.type}{'' if f.required else ', optional'})" for f in contract.input_schema
            )
            tool_lines.append(f"- {contract.tool_id}: {contract.description} Arguments: {args or 'none'}.")
        parts.append(
            "## Tools\n"
            "You may invoke at most ONE tool per turn, using exactly this block:\n"
            "<use_mcp_tool>\n"
            "<server_name>server name here</server_name>\n"
            "<tool_name>tool name here</tool_name>\n"
            '<arguments>{"param": "value"}</arguments>\n'
            "</use_mcp_tool>\n"
            "The arguments must be a single valid JSON object. Your reply is parsed\n"
            "mechanically: a turn must contain either one tool block or a final answer.\n"
            "Available tools:\n" + "\n".join(tool_lines)
        )

    if node.sub_agents:
        agent_lines = []
        for child_id in node.sub_agents:
            child = env.graph.nodes.get(child_id)
            description = child.description if child is not None else ""
            agent_lines.append(f"- agent-{child_id}: {description}")
        parts.append(
            "## Delegation\n"
            "You may delegate a self-contained subtask to a sub-agent by calling\n"
            f'server "agent-<id>" tool "{DELEGATION_TOOL_NAME}" with arguments '
            '{"subtask": "..."}.\n'
            "The sub-agent starts fresh: include everything it needs in the subtask.\n"
            "Available sub-agents:\n" + "\n".join(agent_lines)
        )

    parts.append(
        "## Final answer\n"
        "When the task is solved, reply with no tool block and state the result as:\n"
        "Final Answer: \\boxed{your answer}"
    )
    return "\n\n".join(parts)


def _feedback_message(record: TurnRecord) -> Message | None:
    """How a turn's tool outcome is shown to the model on the next turn."""
    outcome = record.tool_outcome
    if outcome is None:
        return None
    if outcome.status == "ok":
        label = record.tool_invocation.tool_id if record.tool_invocation else "tool"
        return Message(
            role="tool",
            content=f"[{label}] result:\n{outcome.payload}",
            turn_index=record.turn_index,
            node_id=record.node_id,
        )
    assert outcome.fault is not None
    return Message(
        role="user",
        content=f"[fault:{outcome.fault.fault_type}] {outcome.fault.summary}",
        turn_index=record.turn_index,
        node_id=record.node_id,
    )


def build_request_messages(state: AgentState, env: RunEnv) -> tuple[Message, ...]:
    messages = [
        Message(role="system", content=render_system_prompt(state.node, env), node_id=state.node.id),
        Message(role="user", content=state.task, node_id=state.node.id),
    ]
    for record in state.transcript:
        messages.append(record.response)
        feedback = _feedback_message(record)
        if feedback is not None:
            messages.append(feedback)
    return tuple(messages)


# ---------------------------------------------------------------------------
# Turn classification
# ---------------------------------------------------------------------------


def extract_final_text(text: str) -> str | None:
    r"""A reply is final when it carries a balanced ``\boxed{}`` group or a
    ``FINAL:`` line; the boxed form wins when both are present."""
    boxed = extract_boxed_answer(text)
    if boxed is not None:
        return boxed
    match = _FINAL_RE.search(text)
    if match:
        return match.group(1)
    return None


def _classify_reply(state: AgentState, text: str) -> TurnOutcome:
    try:
        invocation = parse_tool_call(text)
    except (MalformedCall, MultipleCalls) as exc:
        return MalformedOutcome(artifact=isolate_fault(exc))

    if invocation is None:
        final = extract_final_text(text)
        if final is not None:
            return FinalOutcome(text=final)
        return MalformedOutcome(
            artifact=FaultArtifact(
                fault_type="malformed-call",
                summary=(
                    "the reply contained neither a tool call nor a final answer. "
                    "Emit exactly one tool block, or finish with: Final Answer: \\boxed{...}. "
                    "Fix the call format and retry."
                ),
                context=f"node={state.node.id}",
            )
        )

    if invocation.server_name.startswith(DELEGATION_SERVER_PREFIX) and invocation.tool_name == DELEGATION_TOOL_NAME:
        child = invocation.server_name[len(DELEGATION_SERVER_PREFIX) :]
        subtask = invocation.arguments.get("subtask")
        if not isinstance(subtask, str) or not subtask.strip():
            return MalformedOutcome(
                artifact=FaultArtifact(
                    fault_type="invalid-arguments",
                    summary=(
                        f"delegation to agent-{child} requires a non-empty string field 'subtask'. "
                        "Fix the call arguments to match the tool contract and retry."
                    ),
                    context=f"node={state.node.id}",
                )
            )
        if child not in state.node.sub_agents:
            return MalformedOutcome(
                artifact=FaultArtifact(
                    fault_type="tool-unavailable",
                    summary=(
                        f"agent-{child} is not a declared sub-agent of {state.node.id!r}. "
                        "Use an alternative source or check the tool id."
                    ),
                    context=f"node={state.node.id}",
                )
            )
        return DelegateOutcome(
            request=DelegationRequest(parent=state.node.id, child=child, subtask=subtask, depth=state.depth),
            invocation=invocation,
        )

    return ToolCallOutcome(invocation=invocation)


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------


def enforce_turn_limit(state: AgentState) -> bool:
    """Pure check: may this state take another turn?"""
    return state.turns_used < state.node.max_turns


def step_turn(state: AgentState, env: RunEnv) -> tuple[TurnOutcome, TurnRecord]:
    """Run one model call and classify the reply.

    Never raises for backend trouble: exhausted retries and non-retryable
    failures become Malformed outcomes carrying a typed artifact, and the
    (empty-response) turn still counts.
    """
    started = time.perf_counter()
    request_messages = build_request_messages(state, env)
    backend = env.backend_for(state.node)
    request = ChatRequest(messages=request_messages, node_id=state.node.id)
    response_text = ""
    outcome: TurnOutcome
    try:
        response = with_retry(env.retry, lambda: backend.complete(request), log=env.log, node_id=state.node.id)
        response_text = response.message.content
        outcome = _classify_reply(state, response_text)
    except RetriesExhausted as exc:
        outcome = MalformedOutcome(artifact=isolate_fault(exc.last_failure))
    except NonretryableFailure as exc:
        outcome = MalformedOutcome(artifact=isolate_fault(exc.failure))

    record = TurnRecord(
        node_id=state.node.id,
        turn_index=state.turns_used,
        request=request_messages,
        response=Message(
            role="assistant",
            content=response_text,
            turn_index=state.turns_used,
            node_id=state.node.id,
        ),
        tool_invocation=getattr(outcome, "invocation", None),
        wall_time=time.perf_counter() - started,
    )
    return outcome, record


def best_effort_text(state: AgentState) -> str:
    """Last non-empty assistant text — what a stopped run can still offer."""
    for record in reversed(state.transcript):
        text = record.response.content.strip()
        if text:
            final = extract_final_text(text)
            return final if final is not None else text
    return ""


def run_agent(state: AgentState, env: RunEnv) -> AgentState:
    """Drive one agent to a terminal status.

    Terminal statuses: ``finished`` (final answer emitted), ``turn-limit``
    (limit hit first; ``final_text`` is then best-effort), ``budget-stop``
    (a run-wide budget ran out).
    """
    while state.status == STATUS_RUNNING:
        if env.budgets.wall_exceeded():
            state.status = STATUS_BUDGET_STOP
            break
        if not enforce_turn_limit(state):
            state.status = STATUS_TURN_LIMIT
            break

        outcome, record = step_turn(state, env)

        if isinstance(outcome, ToolCallOutcome):
            record.tool_outcome = invoke_tool(
                env.registry,
                outcome.invocation,
                retry=env.tool_retry or env.retry,
                log=env.log,
                node_id=state.node.id,
            )
        elif isinstance(outcome, DelegateOutcome):
            record.tool_outcome = delegate_subtask(outcome.request, env)
        elif isinstance(outcome, MalformedOutcome):
            env.log.emit("fault", state.node.id, {"artifact": outcome.artifact.to_dict()})
            record.tool_outcome = ToolOutcome.from_fault(outcome.artifact)
        elif isinstance(outcome, FinalOutcome):
            state.final_text = outcome.text
            state.status = STATUS_FINISHED

        state.transcript.append(record)
        env.log.emit("turn", state.node.id, record.to_dict())
        if env.on_turn is not None:
            env.on_turn(state)

    if state.status in (STATUS_TURN_LIMIT, STATUS_BUDGET_STOP) and not state.final_text:
        state.final_text = best_effort_text(state)
    return state


def _default_node_runner(node: AgentNodeSpec, task: str, env: RunEnv, depth: int) -> tuple[str, AgentState | None]:
    state = AgentState(node=node, task=task, depth=depth)
    run_agent(state, env)
    return state.final_text, state


def delegate_subtask(request: DelegationRequest, env: RunEnv) -> ToolOutcome:
    """Run a declared sub-agent on a subtask and wrap its answer.

    Depth and spawn budgets are enforced here; a denial produces a
    ``budget-exceeded`` artifact instead of spawning.  The child's final
    text is returned as a tool-style observation.
    """
    parent = env.graph.nodes[request.parent]
    assert request.child in parent.sub_agents, "delegation edge must be validated before execution"
    child_node = env.graph.nodes[request.child]

    started = time.perf_counter()
    if request.depth + 1 > env.depth_limit:
        artifact = FaultArtifact(
            fault_type="budget-exceeded",
            summary=(
                f"delegation depth limit ({env.depth_limit}) reached; agent-{request.child} was not started. "
                "Raise the relevant budget or finish with what is known."
            ),
            context=f"parent={request.parent} child={request.child}",
        )
        env.log.emit("fault", request.parent, {"artifact": artifact.to_dict()})
        return ToolOutcome.from_fault(artifact, duration=time.perf_counter() - started)

    if not env.budgets.try_consume_spawn(request.child):
        artifact = FaultArtifact(
            fault_type="budget-exceeded",
            summary=(
                f"agent-spawn budget exhausted; agent-{request.child} was not started. "
                "Raise the relevant budget or finish with what is known."
            ),
            context=f"parent={request.parent} child={request.child}",
        )
        env.log.emit("fault", request.parent, {"artifact": artifact.to_dict()})
        return ToolOutcome.from_fault(artifact, duration=time.perf_counter() - started)

    env.log.emit(
        "delegation",
        request.parent,
        {
            "child": request.child,
            "depth": request.depth + 1,
            "subtask_digest": sha256_hex(canonical_json(request.subtask))[:16],
        },
    )

    if child_node.shared and request.child in env.shared_states and child_node.heavy_mode is None:
        # A shared child keeps its transcript across delegations in this run.
        child_state = env.shared_states[request.child]
        child_state.task = request.subtask
        child_state.status = STATUS_RUNNING
        child_state.final_text = ""
        child_state.depth = request.depth + 1
        run_agent(child_state, env)
        text, state = child_state.final_text, child_state
    else:
        runner = env.node_runner or _default_node_runner
        text, state = runner(child_node, request.subtask, env, request.depth + 1)

    if child_node.shared and state is not None:
        env.shared_states[request.child] = state

    payload = text if text.strip() else "(the sub-agent produced no answer)"
    return ToolOutcome.success(payload, duration=time.perf_counter() - started)
