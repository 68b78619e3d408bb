"""Core message and answer types plus pure text-normalization helpers.

Everything here is side-effect free: conversation messages, normalized
tasks, structured answers, per-turn records, boxed-answer extraction and
answer canonicalization.  Backend-calling input/output processors live in
:mod:`agentflow.processors`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:  # pragma: no cover - type-only imports, no runtime cycle
    from .tools import ToolInvocation, ToolOutcome

ROLES = ("system", "user", "assistant", "tool")
CONSTRAINT_KINDS = ("unit", "range", "format", "spelling", "other")

_BOXED_OPEN = "\\boxed{"


@dataclass(frozen=True)
class Message:
    """One conversation message, tagged with its turn and owning node."""

    role: str
    content: str
    turn_index: int = 0
    node_id: str = ""
    attachments: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown message role: {self.role!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "content": self.content,
            "turn_index": self.turn_index,
            "node_id": self.node_id,
            "attachments": list(self.attachments),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Message":
        return cls(
            role=str(data["role"]),
            content=str(data["content"]),
            turn_index=int(data.get("turn_index", 0)),
            node_id=str(data.get("node_id", "")),
            attachments=tuple(data.get("attachments", ())),
        )


@dataclass(frozen=True)
class Constraint:
    """A task constraint restored by normalization (units, ranges, ...)."""

    text: str
    kind: str = "other"

    def __post_init__(self) -> None:
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind: {self.kind!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "kind": self.kind}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Constraint":
        return cls(text=str(data["text"]), kind=str(data.get("kind", "other")))


@dataclass(frozen=True)
class NormalizedTask:
    """A user query after input processing: clarified, constraints restored."""

    original_query: str
    clarified_goal: str
    restored_constraints: tuple[Constraint, ...] = ()
    ambiguity_flags: tuple[str, ...] = ()
    hints: tuple[str, ...] = ()
    format_tag: str | None = None

    @classmethod
    def identity(cls, query: str) -> "NormalizedTask":
        """The degenerate normalization: the query itself as the goal."""
        return cls(original_query=query, clarified_goal=query)

    def to_dict(self) -> dict[str, Any]:
        return {
            "original_query": self.original_query,
            "clarified_goal": self.clarified_goal,
            "restored_constraints": [c.to_dict() for c in self.restored_constraints],
            "ambiguity_flags": list(self.ambiguity_flags),
            "hints": list(self.hints),
            "format_tag": self.format_tag,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NormalizedTask":
        return cls(
            original_query=str(data["original_query"]),
            clarified_goal=str(data["clarified_goal"]),
            restored_constraints=tuple(Constraint.from_dict(c) for c in data.get("restored_constraints", ())),
            ambiguity_flags=tuple(data.get("ambiguity_flags", ())),
            hints=tuple(data.get("hints", ())),
            format_tag=data.get("format_tag"),
        )


@dataclass(frozen=True)
class Evidence:
    claim: str
    source: str

    def to_dict(self) -> dict[str, Any]:
        return {"claim": self.claim, "source": self.source}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Evidence":
        return cls(claim=str(data["claim"]), source=str(data["source"]))


@dataclass(frozen=True)
class StructuredAnswer:
    """The run's final product: an answer plus cited evidence and warnings."""

    final_answer: str
    evidence: tuple[Evidence, ...] = ()
    warnings: tuple[str, ...] = ()
    format_tag: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "final_answer": self.final_answer,
            "evidence": [e.to_dict() for e in self.evidence],
            "warnings": list(self.warnings),
            "format_tag": self.format_tag,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StructuredAnswer":
        return cls(
            final_answer=str(data["final_answer"]),
            evidence=tuple(Evidence.from_dict(e) for e in data.get("evidence", ())),
            warnings=tuple(data.get("warnings", ())),
            format_tag=data.get("format_tag"),
        )


@dataclass
class TurnRecord:
    """Everything that happened in one agent turn.

    At most one tool invocation (and outcome) per turn; the runtime fills
    ``tool_outcome`` after executing the call the model emitted.
    """

    node_id: str
    turn_index: int
    request: tuple[Message, ...]
    response: Message
    tool_invocation: "ToolInvocation | None" = None
    tool_outcome: "ToolOutcome | None" = None
    wall_time: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "turn_index": self.turn_index,
            "request": [m.to_dict() for m in self.request],
            "response": self.response.to_dict(),
            "tool_invocation": self.tool_invocation.to_dict() if self.tool_invocation else None,
            "tool_outcome": self.tool_outcome.to_dict() if self.tool_outcome else None,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TurnRecord":
        from .tools import ToolInvocation, ToolOutcome  # deferred to avoid an import cycle

        invocation = data.get("tool_invocation")
        outcome = data.get("tool_outcome")
        return cls(
            node_id=str(data["node_id"]),
            turn_index=int(data["turn_index"]),
            request=tuple(Message.from_dict(m) for m in data.get("request", ())),
            response=Message.from_dict(data["response"]),
            tool_invocation=ToolInvocation.from_dict(invocation) if invocation else None,
            tool_outcome=ToolOutcome.from_dict(outcome) if outcome else None,
            wall_time=float(data.get("wall_time", 0.0)),
        )


# ---------------------------------------------------------------------------
# Boxed-answer extraction
# ---------------------------------------------------------------------------


def extract_boxed_answer(text: str) -> str | None:
    r"""Return the contents of the last outermost balanced ``\boxed{...}``.

    Scanning is left to right; a balanced group is consumed whole, so inner
    groups inside it are not considered separately.  An unbalanced opener is
    skipped (its interior is still scanned), and ``None`` is returned only
    when no balanced group exists anywhere.  Braces always count toward
    balance; there is no escape handling.
    """
    result: str | None = None
    pos = 0
    while True:
        start = text.find(_BOXED_OPEN, pos)
        if start < 0:
            return result
        depth = 1
        index = start + len(_BOXED_OPEN)
        while index < len(text) and depth > 0:
            char = text[index]
            if char == "{":
                depth += 1
            elif char == "}":
                depth -= 1
            index += 1
        if depth == 0:
            result = text[start + len(_BOXED_OPEN) : index - 1]
            pos = index
        else:
            # Unbalanced: resume just past the opener so nested groups are seen.
            pos = start + len(_BOXED_OPEN)


# ---------------------------------------------------------------------------
# Answer canonicalization
# ---------------------------------------------------------------------------

NUMERIC_TAGS = frozenset({"integer", "number"})
ORDERED_LIST_TAGS = frozenset({"comma-list"})
UNORDERED_LIST_TAGS = frozenset({"comma-list-unordered"})

_THOUSANDS_SEP = re.compile(r"(?<=\d),(?=\d)")
_LEADING_ZEROS = re.compile(r"(?<![\d.])0+(?=\d)")


def canonicalize_answer(text: str, format_tag: str | None = None) -> str:
    """Normalize an answer string for equality comparison.

    Always: trim, collapse whitespace runs, lowercase, strip trailing
    periods.  Numeric tags additionally drop thousands separators and
    leading zeros; list tags normalize comma spacing, and the unordered
    variant sorts items.  Idempotent for any fixed tag.
    """
    out = re.sub(r"\s+", " ", text.strip()).lower().rstrip(".").strip()
    if format_tag in NUMERIC_TAGS:
        out = _THOUSANDS_SEP.sub("", out)
        out = _LEADING_ZEROS.sub("", out)
    elif format_tag in ORDERED_LIST_TAGS or format_tag in UNORDERED_LIST_TAGS:
        items = [item.strip() for item in out.split(",")]
        items = [item for item in items if item]
        if format_tag in UNORDERED_LIST_TAGS:
            items.sort()
        out = ", ".join(items)
    return out
