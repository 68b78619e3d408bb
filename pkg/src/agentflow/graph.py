"""Declarative agent-graph specifications.

A graph document declares every agent node up front (description, prompt,
backend, callable sub-agents, tool ids, turn limit, optional heavy-reasoning
policy) plus a single entry node and run-wide budgets.  Parsing checks shape
only; :func:`validate_graph` reports every invariant violation as data so
callers can render or assert on them.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

NODE_ID_PATTERN = re.compile(r"^[a-z0-9_-]+$")

DEFAULT_MAX_TURNS = 20
DEFAULT_MAX_SPAWNED_AGENTS = 8
DEFAULT_MAX_VERIFICATION_ROUNDS = 10
DEFAULT_WALL_CLOCK_LIMIT = 600.0

HEAVY_POLICIES = ("ensemble", "verification")
HEAVY_TRIGGERS = ("always", "sentinel", "never")


# ---------------------------------------------------------------------------
# Errors (parse time)
# ---------------------------------------------------------------------------


class GraphSpecError(Exception):
    """Base class for graph-document parse errors."""


class GraphSyntaxError(GraphSpecError):
    """The document is not well-formed JSON (or has duplicate keys)."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class MissingFieldError(GraphSpecError):
    def __init__(self, field_name: str, where: str):
        self.field_name = field_name
        self.where = where
        super().__init__(f"missing required field {field_name!r} in {where}")


class UnknownFieldError(GraphSpecError):
    def __init__(self, field_name: str, where: str):
        self.field_name = field_name
        self.where = where
        super().__init__(f"unknown field {field_name!r} in {where}")


class FieldTypeError(GraphSpecError):
    def __init__(self, field_name: str, expected: str, where: str):
        self.field_name = field_name
        self.expected = expected
        self.where = where
        super().__init__(f"field {field_name!r} in {where} must be {expected}")


class UnknownNodeError(GraphSpecError):
    def __init__(self, node_id: str):
        self.node_id = node_id
        super().__init__(f"unknown node id: {node_id!r}")


# ---------------------------------------------------------------------------
# Spec types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BudgetSpec:
    """Run-wide resource caps.

    Values are not validated here so that shape-parsing and invariant
    checking stay separate; :func:`validate_graph` flags nonpositive limits.
    """

    max_spawned_agents: int = DEFAULT_MAX_SPAWNED_AGENTS
    max_verification_rounds: int = DEFAULT_MAX_VERIFICATION_ROUNDS
    wall_clock_limit: float = DEFAULT_WALL_CLOCK_LIMIT

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_spawned_agents": self.max_spawned_agents,
            "max_verification_rounds": self.max_verification_rounds,
            "wall_clock_limit": self.wall_clock_limit,
        }


@dataclass(frozen=True)
class EnsembleMember:
    """One parallel solver in an ensemble: backend + prompt variant + weight."""

    backend: str
    prompt_variant: str = "default"
    weight: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "backend": self.backend,
            "prompt_variant": self.prompt_variant,
            "weight": self.weight,
        }


@dataclass(frozen=True)
class HeavyModeSpec:
    """Optional heavy-reasoning policy for a node.

    ``ensemble`` runs every member and votes on the candidates;
    ``verification`` runs a generator/verifier loop for up to ``rounds``
    rounds.  ``trigger`` controls activation: unconditionally, on a model
    sentinel, or never.
    """

    policy: str
    ensemble_members: tuple[EnsembleMember, ...] = ()
    rounds: int = 1
    trigger: str = "always"

    def to_dict(self) -> dict[str, Any]:
        return {
            "policy": self.policy,
            "ensemble_members": [m.to_dict() for m in self.ensemble_members],
            "rounds": self.rounds,
            "trigger": self.trigger,
        }


@dataclass(frozen=True)
class AgentNodeSpec:
    """Declaration of a single agent node."""

    id: str
    description: str
    prompt: str
    backend: str
    sub_agents: tuple[str, ...] = ()
    tools: tuple[str, ...] = ()
    input_processor: bool | str = False
    output_processor: bool | str = False
    max_turns: int = DEFAULT_MAX_TURNS
    heavy_mode: HeavyModeSpec | None = None
    shared: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "description": self.description,
            "prompt": self.prompt,
            "backend": self.backend,
            "sub_agents": list(self.sub_agents),
            "tools": list(self.tools),
            "input_processor": self.input_processor,
            "output_processor": self.output_processor,
            "max_turns": self.max_turns,
            "heavy_mode": self.heavy_mode.to_dict() if self.heavy_mode else None,
            "shared": self.shared,
        }


@dataclass(frozen=True)
class AgentGraphSpec:
    """A parsed agent graph: all nodes declared, one entry, shared budgets."""

    nodes: dict[str, AgentNodeSpec]
    entry: str
    budgets: BudgetSpec = field(default_factory=BudgetSpec)
    version: str = "1"

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "entry": self.entry,
            "budgets": self.budgets.to_dict(),
            "nodes": {node_id: node.to_dict() for node_id, node in self.nodes.items()},
        }


# ---------------------------------------------------------------------------
# Parsing (shape checks only)
# ---------------------------------------------------------------------------

_TOP_FIELDS = {"version", "entry", "budgets", "nodes"}
_BUDGET_FIELDS = {"max_spawned_agents", "max_verification_rounds", "wall_clock_limit"}
_NODE_FIELDS = {
    "description",
    "prompt",
    "backend",
    "sub_agents",
    "tools",
    "input_processor",
    "output_processor",
    "max_turns",
    "heavy_mode",
    "shared",
}
_HEAVY_FIELDS = {"policy", "ensemble_members", "rounds", "trigger"}
_MEMBER_FIELDS = {"backend", "prompt_variant", "weight"}


def _no_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _require(obj: dict[str, Any], key: str, where: str) -> Any:
    if key not in obj:
        raise MissingFieldError(key, where)
    return obj[key]


def _reject_unknown(obj: dict[str, Any], allowed: set[str], where: str) -> None:
    for key in obj:
        if key not in allowed:
            raise UnknownFieldError(key, where)


def _as_str(value: Any, name: str, where: str) -> str:
    if not isinstance(value, str):
        raise FieldTypeError(name, "a string", where)
    return value


def _as_bool(value: Any, name: str, where: str) -> bool:
    if not isinstance(value, bool):
        raise FieldTypeError(name, "a boolean", where)
    return value


def _as_int(value: Any, name: str, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise FieldTypeError(name, "an integer", where)
    return value


def _as_number(value: Any, name: str, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FieldTypeError(name, "a number", where)
    return float(value)


def _as_str_list(value: Any, name: str, where: str) -> tuple[str, ...]:
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise FieldTypeError(name, "a list of strings", where)
    return tuple(value)


def _parse_budgets(value: Any) -> BudgetSpec:
    if not isinstance(value, dict):
        raise FieldTypeError("budgets", "an object", "top level")
    _reject_unknown(value, _BUDGET_FIELDS, "budgets")
    spec = BudgetSpec()
    if "max_spawned_agents" in value:
        spec = replace(spec, max_spawned_agents=_as_int(value["max_spawned_agents"], "max_spawned_agents", "budgets"))
    if "max_verification_rounds" in value:
        spec = replace(
            spec, max_verification_rounds=_as_int(value["max_verification_rounds"], "max_verification_rounds", "budgets")
        )
    if "wall_clock_limit" in value:
        spec = replace(spec, wall_clock_limit=_as_number(value["wall_clock_limit"], "wall_clock_limit", "budgets"))
    return spec


def _parse_heavy_mode(value: Any, where: str) -> HeavyModeSpec:
    if not isinstance(value, dict):
        raise FieldTypeError("heavy_mode", "an object or null", where)
    _reject_unknown(value, _HEAVY_FIELDS, where)
    policy = _as_str(_require(value, "policy", where), "policy", where)
    if policy not in HEAVY_POLICIES:
        raise FieldTypeError("policy", f"one of {HEAVY_POLICIES}", where)
    trigger = "always"
    if "trigger" in value:
        trigger = _as_str(value["trigger"], "trigger", where)
        if trigger not in HEAVY_TRIGGERS:
            raise FieldTypeError("trigger", f"one of {HEAVY_TRIGGERS}", where)
    members: list[EnsembleMember] = []
    raw_members = value.get("ensemble_members", [])
    if not isinstance(raw_members, list):
        raise FieldTypeError("ensemble_members", "a list", where)
    for index, raw in enumerate(raw_members):
        member_where = f"{where}.ensemble_members[{index}]"
        if not isinstance(raw, dict):
            raise FieldTypeError("ensemble_members", "a list of objects", where)
        _reject_unknown(raw, _MEMBER_FIELDS, member_where)
        backend = _as_str(_require(raw, "backend", member_where), "backend", member_where)
        variant = "default"
        if "prompt_variant" in raw:
            variant = _as_str(raw["prompt_variant"], "prompt_variant", member_where)
        weight = 1.0
        if "weight" in raw:
            weight = _as_number(raw["weight"], "weight", member_where)
        members.append(EnsembleMember(backend=backend, prompt_variant=variant, weight=weight))
    rounds = 1
    if "rounds" in value:
        rounds = _as_int(value["rounds"], "rounds", where)
    return HeavyModeSpec(policy=policy, ensemble_members=tuple(members), rounds=rounds, trigger=trigger)


def _parse_node(node_id: str, value: Any, entry: str) -> AgentNodeSpec:
    where = f"node {node_id!r}"
    if not isinstance(value, dict):
        raise FieldTypeError(node_id, "an object", "nodes")
    _reject_unknown(value, _NODE_FIELDS, where)
    description = _as_str(_require(value, "description", where), "description", where)
    prompt = _as_str(_require(value, "prompt", where), "prompt", where)
    backend = _as_str(_require(value, "backend", where), "backend", where)

    sub_agents = _as_str_list(value.get("sub_agents", []), "sub_agents", where)
    tools = _as_str_list(value.get("tools", []), "tools", where)

    is_entry = node_id == entry

    def _processor(name: str) -> bool | str:
        if name not in value:
            return is_entry  # entry node processes I/O by default; sub-nodes do not
        raw = value[name]
        if isinstance(raw, (bool, str)):
            return raw
        raise FieldTypeError(name, "a boolean or processor-profile string", where)

    max_turns = DEFAULT_MAX_TURNS
    if "max_turns" in value:
        max_turns = _as_int(value["max_turns"], "max_turns", where)

    heavy = None
    if value.get("heavy_mode") is not None:
        heavy = _parse_heavy_mode(value["heavy_mode"], where)

    shared = False
    if "shared" in value:
        shared = _as_bool(value["shared"], "shared", where)

    return AgentNodeSpec(
        id=node_id,
        description=description,
        prompt=prompt,
        backend=backend,
        sub_agents=sub_agents,
        tools=tools,
        input_processor=_processor("input_processor"),
        output_processor=_processor("output_processor"),
        max_turns=max_turns,
        heavy_mode=heavy,
        shared=shared,
    )


def parse_graph_spec(text: str) -> AgentGraphSpec:
    """Parse a JSON graph document, checking shape only.

    Raises :class:`GraphSyntaxError` for malformed JSON (with line/column)
    or duplicate keys, :class:`MissingFieldError` / :class:`UnknownFieldError`
    for absent or undeclared fields, and :class:`FieldTypeError` for values
    of the wrong type.  Value invariants (positivity, cycles, dangling
    references, ...) are deferred to :func:`validate_graph`.
    """
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise GraphSyntaxError(exc.msg, exc.lineno, exc.colno) from exc
    except ValueError as exc:  # duplicate key from the pairs hook
        raise GraphSyntaxError(str(exc)) from exc

    if not isinstance(doc, dict):
        raise FieldTypeError("document", "a JSON object", "top level")
    _reject_unknown(doc, _TOP_FIELDS, "top level")

    entry = _as_str(_require(doc, "entry", "top level"), "entry", "top level")
    raw_nodes = _require(doc, "nodes", "top level")
    if not isinstance(raw_nodes, dict):
        raise FieldTypeError("nodes", "an object mapping node ids to node declarations", "top level")

    version = "1"
    if "version" in doc:
        version = _as_str(doc["version"], "version", "top level")

    budgets = BudgetSpec()
    if "budgets" in doc:
        budgets = _parse_budgets(doc["budgets"])

    nodes = {node_id: _parse_node(node_id, raw, entry) for node_id, raw in raw_nodes.items()}
    return AgentGraphSpec(nodes=nodes, entry=entry, budgets=budgets, version=version)


def load_graph_spec(path: str | Path) -> AgentGraphSpec:
    return parse_graph_spec(Path(path).read_text(encoding="utf-8"))


def serialize_graph_spec(spec: AgentGraphSpec) -> str:
    """Render *spec* back to JSON text with every field written explicitly.

    Round-trips: ``parse_graph_spec(serialize_graph_spec(s)) == s``.
    """
    return json.dumps(spec.to_dict(), indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# Validation (invariants as data)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


@dataclass(frozen=True)
class EntryViolation(Violation):
    entry: str = ""


@dataclass(frozen=True)
class InvalidNodeIdViolation(Violation):
    node_id: str = ""


@dataclass(frozen=True)
class EmptyFieldViolation(Violation):
    node_id: str = ""
    field_name: str = ""


@dataclass(frozen=True)
class DanglingReferenceViolation(Violation):
    from_node: str = ""
    missing: str = ""


@dataclass(frozen=True)
class DuplicateReferenceViolation(Violation):
    node_id: str = ""
    field_name: str = ""
    value: str = ""


@dataclass(frozen=True)
class CycleViolation(Violation):
    path: tuple[str, ...] = ()


@dataclass(frozen=True)
class MaxTurnsViolation(Violation):
    node_id: str = ""
    value: int = 0


@dataclass(frozen=True)
class BudgetViolation(Violation):
    field_name: str = ""
    value: float = 0.0


@dataclass(frozen=True)
class HeavyModeViolation(Violation):
    node_id: str = ""
    reason: str = ""


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def of_kind(self, kind: str) -> tuple[Violation, ...]:
        return tuple(v for v in self.violations if v.kind == kind)

    def lines(self) -> list[str]:
        return [f"{v.kind}: {v.message}" for v in self.violations]

    def __str__(self) -> str:
        if self.ok:
            return "graph OK"
        return "\n".join(self.lines())


def _find_cycles(nodes: dict[str, AgentNodeSpec]) -> list[tuple[str, ...]]:
    """Collect one cycle path per back-edge, via DFS in declaration order."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[str, int] = {node_id: WHITE for node_id in nodes}
    stack: list[str] = []
    cycles: list[tuple[str, ...]] = []

    def visit(node_id: str) -> None:
        color[node_id] = GRAY
        stack.append(node_id)
        seen: set[str] = set()
        for child in nodes[node_id].sub_agents:
            if child not in nodes or child in seen:
                continue  # dangling and duplicate refs are reported separately
            seen.add(child)
            state = color[child]
            if state == WHITE:
                visit(child)
            elif state == GRAY:
                start = stack.index(child)
                cycles.append(tuple(stack[start:]) + (child,))
        stack.pop()
        color[node_id] = BLACK

    for node_id in nodes:
        if color[node_id] == WHITE:
            visit(node_id)
    return cycles


def validate_graph(spec: AgentGraphSpec) -> ValidationReport:
    """Check every graph invariant and report all violations as data."""
    violations: list[Violation] = []

    if spec.entry not in spec.nodes:
        violations.append(
            EntryViolation(
                kind="entry",
                message=f"entry {spec.entry!r} does not name a declared node",
                entry=spec.entry,
            )
        )

    budgets = spec.budgets
    for field_name, value in (
        ("max_spawned_agents", budgets.max_spawned_agents),
        ("max_verification_rounds", budgets.max_verification_rounds),
        ("wall_clock_limit", budgets.wall_clock_limit),
    ):
        if value <= 0:
            violations.append(
                BudgetViolation(
                    kind="budget",
                    message=f"budget {field_name} must be strictly positive, got {value}",
                    field_name=field_name,
                    value=float(value),
                )
            )

    for node_id, node in spec.nodes.items():
        if not NODE_ID_PATTERN.match(node_id):
            violations.append(
                InvalidNodeIdViolation(
                    kind="invalid-node-id",
                    message=f"node id {node_id!r} must match [a-z0-9_-]+",
                    node_id=node_id,
                )
            )
        for field_name in ("description", "prompt", "backend"):
            if not getattr(node, field_name).strip():
                violations.append(
                    EmptyFieldViolation(
                        kind="empty-field",
                        message=f"node {node_id!r} has an empty {field_name}",
                        node_id=node_id,
                        field_name=field_name,
                    )
                )
        if node.max_turns < 1:
            violations.append(
                MaxTurnsViolation(
                    kind="max-turns",
                    message=f"node {node_id!r} max_turns must be >= 1, got {node.max_turns}",
                    node_id=node_id,
                    value=node.max_turns,
                )
            )
        for field_name, refs in (("sub_agents", node.sub_agents), ("tools", node.tools)):
            seen: set[str] = set()
            for ref in refs:
                if ref in seen:
                    violations.append(
                        DuplicateReferenceViolation(
                            kind="duplicate-reference",
                            message=f"node {node_id!r} lists {ref!r} more than once in {field_name}",
                            node_id=node_id,
                            field_name=field_name,
                            value=ref,
                        )
                    )
                seen.add(ref)
        for child in dict.fromkeys(node.sub_agents):
            if child not in spec.nodes:
                violations.append(
                    DanglingReferenceViolation(
                        kind="dangling-reference",
                        message=f"node {node_id!r} delegates to undeclared node {child!r}",
                        from_node=node_id,
                        missing=child,
                    )
                )
        if node.heavy_mode is not None:
            heavy = node.heavy_mode
            if heavy.policy == "ensemble" and not heavy.ensemble_members:
                violations.append(
                    HeavyModeViolation(
                        kind="heavy-mode",
                        message=f"node {node_id!r} declares an ensemble with no members",
                        node_id=node_id,
                        reason="no-members",
                    )
                )
            if heavy.ensemble_members:
                if any(m.weight < 0 for m in heavy.ensemble_members):
                    violations.append(
                        HeavyModeViolation(
                            kind="heavy-mode",
                            message=f"node {node_id!r} has a negative ensemble member weight",
                            node_id=node_id,
                            reason="negative-weight",
                        )
                    )
                elif all(m.weight == 0 for m in heavy.ensemble_members):
                    violations.append(
                        HeavyModeViolation(
                            kind="heavy-mode",
                            message=f"node {node_id!r} ensemble weights are all zero",
                            node_id=node_id,
                            reason="all-zero-weights",
                        )
                    )
                for member in heavy.ensemble_members:
                    if not member.backend.strip():
                        violations.append(
                            HeavyModeViolation(
                                kind="heavy-mode",
                                message=f"node {node_id!r} has an ensemble member with an empty backend",
                                node_id=node_id,
                                reason="empty-member-backend",
                            )
                        )
            if heavy.rounds < 1:
                violations.append(
                    HeavyModeViolation(
                        kind="heavy-mode",
                        message=f"node {node_id!r} heavy-mode rounds must be >= 1, got {heavy.rounds}",
                        node_id=node_id,
                        reason="nonpositive-rounds",
                    )
                )
            elif heavy.policy == "verification" and heavy.rounds > budgets.max_verification_rounds:
                violations.append(
                    HeavyModeViolation(
                        kind="heavy-mode",
                        message=(
                            f"node {node_id!r} asks for {heavy.rounds} verification rounds,"
                            f" above the budget of {budgets.max_verification_rounds}"
                        ),
                        node_id=node_id,
                        reason="rounds-above-budget",
                    )
                )

    for path in _find_cycles(spec.nodes):
        violations.append(
            CycleViolation(
                kind="cycle",
                message="delegation cycle: " + " -> ".join(path),
                path=path,
            )
        )

    return ValidationReport(violations=tuple(violations))


def delegation_closure(spec: AgentGraphSpec, start: str) -> list[str]:
    """Every node reachable from *start* via sub-agent edges, BFS order.

    Ties (multiple children of one node) resolve in declaration order.
    Raises :class:`UnknownNodeError` for an unknown start node or for any
    reference to an undeclared node met during traversal.
    """
    if start not in spec.nodes:
        raise UnknownNodeError(start)
    order: list[str] = [start]
    seen: set[str] = {start}
    queue: list[str] = [start]
    while queue:
        current = queue.pop(0)
        for child in spec.nodes[current].sub_agents:
            if child not in spec.nodes:
                raise UnknownNodeError(child)
            if child not in seen:
                seen.add(child)
                order.append(child)
                queue.append(child)
    return order
