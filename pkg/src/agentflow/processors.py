"""Input and output processors around an agent run.

``augment_query`` turns a raw user query into a :class:`NormalizedTask`
(clarified goal, restored constraints, ambiguity flags); it degrades to an
identity normalization instead of raising when its backend is unavailable.
``synthesize_output`` condenses a finished transcript into a
:class:`StructuredAnswer`, falling back to boxed-answer extraction when the
synthesis backend fails.
"""
from __future__ import annotations

import json
import logging
import re
from typing import Any

from .backend import (
    ChatRequest,
    NonretryableFailure,
    RetriesExhausted,
    RetryPolicy,
    with_retry,
)
from .events import EventLog
from .messages import (
    CONSTRAINT_KINDS,
    Constraint,
    Evidence,
    Message,
    NormalizedTask,
    StructuredAnswer,
    TurnRecord,
    canonicalize_answer,
    extract_boxed_answer,
)
from .prompts import load_prompt

logger = logging.getLogger(__name__)

NORMALIZATION_UNAVAILABLE_FLAG = "normalization unavailable"

_MAX_TRANSCRIPT_CHARS = 16000
_FENCE_RE = re.compile(r"^\s*```[a-z]*\s*|\s*```\s*$")


class EmptyTranscriptError(Exception):
    """Synthesis was asked to summarize a transcript with no assistant output."""


def _strip_fences(text: str) -> str:
    return _FENCE_RE.sub("", text.strip())


def _parse_json_reply(text: str) -> dict[str, Any] | None:
    try:
        parsed = json.loads(_strip_fences(text))
    except json.JSONDecodeError:
        return None
    return parsed if isinstance(parsed, dict) else None


def _string_items(raw: Any) -> tuple[str, ...]:
    if not isinstance(raw, list):
        return ()
    return tuple(str(item) for item in raw if str(item).strip())


def augment_query(
    query: str,
    backend: Any,
    *,
    retry: RetryPolicy | None = None,
    log: EventLog | None = None,
    node_id: str = "",
) -> NormalizedTask:
    """Normalize a raw query through the normalizer backend.

    An empty query is a caller error and raises ``ValueError`` before any
    backend traffic.  After that point this never raises: any backend or
    parse failure degrades to the identity normalization with the
    ``normalization unavailable`` ambiguity flag set.
    """
    if not query.strip():
        raise ValueError("query must be non-empty")
    retry = retry or RetryPolicy()
    request = ChatRequest(
        messages=(
            Message(role="system", content=load_prompt("normalizer"), node_id=node_id),
            Message(role="user", content=query, node_id=node_id),
        ),
        node_id=node_id,
    )
    try:
        response = with_retry(retry, lambda: backend.complete(request), log=log, node_id=node_id)
    except (RetriesExhausted, NonretryableFailure) as exc:
        logger.info("query normalization unavailable: %s", exc)
        return NormalizedTask(
            original_query=query,
            clarified_goal=query,
            ambiguity_flags=(NORMALIZATION_UNAVAILABLE_FLAG,),
        )

    parsed = _parse_json_reply(response.message.content)
    if parsed is None or not str(parsed.get("clarified_goal", "")).strip():
        logger.info("normalizer reply unusable; degrading to identity normalization")
        return NormalizedTask(
            original_query=query,
            clarified_goal=query,
            ambiguity_flags=(NORMALIZATION_UNAVAILABLE_FLAG,),
        )

    constraints: list[Constraint] = []
    for raw in parsed.get("constraints", []) or []:
        if isinstance(raw, dict) and str(raw.get("text", "")).strip():
            kind = str(raw.get("kind", "other"))
            constraints.append(Constraint(text=str(raw["text"]), kind=kind if kind in CONSTRAINT_KINDS else "other"))

    format_tag = parsed.get("format_tag")
    return NormalizedTask(
        original_query=query,
        clarified_goal=str(parsed["clarified_goal"]),
        restored_constraints=tuple(constraints),
        ambiguity_flags=_string_items(parsed.get("ambiguities")),
        hints=_string_items(parsed.get("hints")),
        format_tag=str(format_tag) if isinstance(format_tag, str) and format_tag.strip() else None,
    )


def render_transcript(transcript: list[TurnRecord] | tuple[TurnRecord, ...]) -> str:
    """Turn-indexed digest of a transcript, bounded in size."""
    lines: list[str] = []
    for record in transcript:
        content = record.response.content.strip()
        if content:
            lines.append(f"turn {record.turn_index} assistant: {content}")
        outcome = record.tool_outcome
        if outcome is not None:
            if outcome.status == "ok":
                lines.append(f"turn {record.turn_index} tool result: {outcome.payload.strip()}")
            elif outcome.fault is not None:
                lines.append(f"turn {record.turn_index} fault [{outcome.fault.fault_type}]: {outcome.fault.summary}")
    text = "\n".join(lines)
    if len(text) > _MAX_TRANSCRIPT_CHARS:
        text = text[-_MAX_TRANSCRIPT_CHARS:]
    return text


def _last_assistant(transcript: list[TurnRecord] | tuple[TurnRecord, ...]) -> TurnRecord | None:
    for record in reversed(list(transcript)):
        if record.response.content.strip():
            return record
    return None


def _fallback_answer(
    transcript: list[TurnRecord] | tuple[TurnRecord, ...],
    task: NormalizedTask,
    reason: str,
) -> StructuredAnswer:
    record = _last_assistant(transcript)
    assert record is not None  # guarded by the EmptyTranscriptError check
    text = record.response.content
    boxed = extract_boxed_answer(text)
    answer = boxed if boxed is not None else text.strip()
    if task.format_tag:
        answer = canonicalize_answer(answer, task.format_tag)
    return StructuredAnswer(
        final_answer=answer,
        evidence=(Evidence(claim=answer, source=f"turn:{record.turn_index}"),),
        warnings=(reason,),
        format_tag=task.format_tag,
    )


def synthesize_output(
    transcript: list[TurnRecord] | tuple[TurnRecord, ...],
    task: NormalizedTask,
    backend: Any,
    *,
    retry: RetryPolicy | None = None,
    log: EventLog | None = None,
    node_id: str = "",
) -> StructuredAnswer:
    """Condense a transcript into a structured, format-honoring answer.

    Makes exactly one (retry-wrapped) backend call.  If the backend fails
    or replies unusably, falls back to extracting the last boxed answer
    from the transcript and notes the degradation in ``warnings``.  A
    transcript without any assistant output raises
    :class:`EmptyTranscriptError`.
    """
    records = list(transcript)
    if _last_assistant(records) is None:
        raise EmptyTranscriptError("transcript contains no assistant output to synthesize from")
    retry = retry or RetryPolicy()

    parts = [f"Task: {task.clarified_goal}"]
    if task.restored_constraints:
        parts.append("Constraints:\n" + "\n".join(f"- [{c.kind}] {c.text}" for c in task.restored_constraints))
    if task.format_tag:
        parts.append(f"Requested answer format: {task.format_tag}")
    parts.append("Transcript:\n" + render_transcript(records))
    request = ChatRequest(
        messages=(
            Message(role="system", content=load_prompt("synthesizer"), node_id=node_id),
            Message(role="user", content="\n\n".join(parts), node_id=node_id),
        ),
        node_id=node_id,
    )

    try:
        response = with_retry(retry, lambda: backend.complete(request), log=log, node_id=node_id)
    except (RetriesExhausted, NonretryableFailure) as exc:
        logger.info("synthesis backend unavailable: %s", exc)
        return _fallback_answer(records, task, "synthesis unavailable; answer extracted from the transcript")

    parsed = _parse_json_reply(response.message.content)
    if parsed is None or not str(parsed.get("final_answer", "")).strip():
        return _fallback_answer(records, task, "synthesis reply unusable; answer extracted from the transcript")

    final_answer = str(parsed["final_answer"])
    if task.format_tag:
        final_answer = canonicalize_answer(final_answer, task.format_tag)

    known_turns = {record.turn_index for record in records}
    evidence: list[Evidence] = []
    warnings = list(_string_items(parsed.get("warnings")))
    for raw in parsed.get("evidence", []) or []:
        if not isinstance(raw, dict):
            continue
        claim = str(raw.get("claim", "")).strip()
        source = str(raw.get("source", "")).strip()
        if not claim or not source:
            continue
        turn_match = re.fullmatch(r"turn:(\d+)", source)
        if turn_match and int(turn_match.group(1)) in known_turns:
            evidence.append(Evidence(claim=claim, source=source))
        else:
            # Keep the claim but flag the citation instead of inventing a turn.
            warnings.append(f"evidence dropped: source {source!r} does not name a transcript turn")

    return StructuredAnswer(
        final_answer=final_answer,
        evidence=tuple(evidence),
        warnings=tuple(warnings),
        format_tag=task.format_tag,
    )
