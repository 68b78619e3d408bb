"""Heavy-reasoning policies: parallel ensembles with voting, and a
generator/verifier loop with early stop.

Vote weights are exact rationals (:class:`fractions.Fraction`), so scaling
every weight by the same positive factor provably never changes the argmax.
``run_node_task`` is the policy-aware dispatcher the controller installs as
the node runner: it activates a node's heavy mode per its trigger and falls
back to a plain agent run otherwise.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Any

from .backend import ChatRequest, NonretryableFailure, RetriesExhausted, with_retry
from .events import sha256_hex
from .graph import AgentNodeSpec
from .messages import Message, canonicalize_answer
from .prompts import apply_variant, load_prompt
from .runtime import (
    STATUS_FINISHED,
    AgentState,
    RunEnv,
    run_agent,
)

logger = logging.getLogger(__name__)

HEAVY_SENTINEL = "<needs_heavy/>"

VERDICT_ACCEPT = "accept"
VERDICT_REVISE = "revise"


class AllMembersFailed(Exception):
    """Every ensemble member failed to produce an answer."""

    def __init__(self, reasons: list[str]):
        self.reasons = reasons
        super().__init__("all ensemble members failed: " + "; ".join(reasons))


class NoCandidatesError(Exception):
    """Vote aggregation was called with no successful candidates."""


@dataclass(frozen=True)
class Candidate:
    """One ensemble member's product, canonicalized for comparison."""

    answer: str
    raw_answer: str
    member_id: str
    weight: Fraction = Fraction(1)
    evidence: tuple[str, ...] = ()
    status: str = "ok"  # "ok" | "failed"


@dataclass(frozen=True)
class VoteResult:
    winner: str
    tally: dict[str, Fraction]
    tie_broken: bool
    participating: int


@dataclass(frozen=True)
class VerificationRound:
    answer: str
    verdict: str  # "accept" | "revise"
    feedback: str


@dataclass(frozen=True)
class VerificationTrace:
    rounds: tuple[VerificationRound, ...]
    stopped_early: bool
    final: str
    verified: bool
    all_rounds_failed: bool


def maybe_activate_heavy(node: AgentNodeSpec, trigger: str | None = None, model_output: str = "") -> bool:
    """Decide heavy-mode activation for a node.

    ``always`` activates unconditionally, ``never`` not at all, and
    ``sentinel`` only when the model's own output contains the activation
    sentinel.  A node without a heavy-mode declaration never activates.
    """
    if node.heavy_mode is None:
        return False
    kind = trigger if trigger is not None else node.heavy_mode.trigger
    if kind == "always":
        return True
    if kind == "never":
        return False
    if kind == "sentinel":
        return HEAVY_SENTINEL in model_output
    raise ValueError(f"unknown activation trigger: {kind!r}")


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


def _run_member(node: AgentNodeSpec, index: int, member: Any, task: str, env: RunEnv) -> Candidate:
    member_id = f"m{index}:{member.backend}:{member.prompt_variant}"
    if not env.budgets.try_consume_spawn(f"{node.id}.m{index}"):
        return Candidate(
            answer="",
            raw_answer="",
            member_id=member_id,
            weight=Fraction(str(member.weight)),
            status="failed",
        )
    env.log.emit(
        "ensemble-member",
        node.id,
        {"member": index, "backend": member.backend, "prompt_variant": member.prompt_variant},
    )
    member_node = replace(
        node,
        id=f"{node.id}.m{index}",
        backend=member.backend,
        prompt=apply_variant(node.prompt, member.prompt_variant),
        heavy_mode=None,  # members never recurse into heavy mode
        input_processor=False,
        output_processor=False,
    )
    state = AgentState(node=member_node, task=task)
    run_agent(state, env)
    raw = state.final_text
    ok = state.status == STATUS_FINISHED and bool(raw.strip())
    return Candidate(
        answer=canonicalize_answer(raw) if ok else "",
        raw_answer=raw,
        member_id=member_id,
        weight=Fraction(str(member.weight)),
        status="ok" if ok else "failed",
    )


def run_ensemble(node: AgentNodeSpec, task: str, env: RunEnv) -> list[Candidate]:
    """Run every ensemble member on the task; one full agent run each.

    Members run concurrently up to ``env.heavy_parallelism`` in live mode
    and strictly sequentially in deterministic mode (so event order is
    reproducible).  Candidates come back in declaration order.  Raises
    :class:`AllMembersFailed` when no member yields an answer.
    """
    config = node.heavy_mode
    assert config is not None and config.ensemble_members, "ensemble requires declared members"
    members = list(enumerate(config.ensemble_members))

    if env.deterministic or env.heavy_parallelism <= 1 or len(members) == 1:
        candidates = [_run_member(node, i, m, task, env) for i, m in members]
    else:
        with ThreadPoolExecutor(max_workers=min(env.heavy_parallelism, len(members))) as pool:
            futures = [pool.submit(_run_member, node, i, m, task, env) for i, m in members]
            candidates = [f.result() for f in futures]

    if all(c.status != "ok" for c in candidates):
        raise AllMembersFailed([f"{c.member_id}: no answer" for c in candidates])
    return candidates


def aggregate_votes(candidates: list[Candidate], mode: str = "majority") -> VoteResult:
    """Pick a winner among successful candidates.

    ``majority`` counts one vote per candidate; ``weighted`` uses declared
    weights.  Answers compare by canonical form.  Ties break toward the
    answer whose earliest contributing candidate has the lowest declaration
    index (tallies preserve first-occurrence order, so that is simply the
    first tied key).
    """
    if mode not in ("majority", "weighted"):
        raise ValueError(f"unknown voting mode: {mode!r}")
    ok = [c for c in candidates if c.status == "ok"]
    if not ok:
        raise NoCandidatesError("no successful candidates to vote over")
    tally: dict[str, Fraction] = {}
    for candidate in ok:
        weight = Fraction(1) if mode == "majority" else candidate.weight
        tally[candidate.answer] = tally.get(candidate.answer, Fraction(0)) + weight
    best = max(tally.values())
    winners = [answer for answer, total in tally.items() if total == best]
    return VoteResult(
        winner=winners[0],
        tally=tally,
        tie_broken=len(winners) > 1,
        participating=len(ok),
    )


# ---------------------------------------------------------------------------
# Verification loop
# ---------------------------------------------------------------------------


def _verifier_verdict(node: AgentNodeSpec, task: str, answer: str, env: RunEnv) -> tuple[str, str]:
    """One verifier call; returns (verdict, feedback). Faults count as revise."""
    backend = env.backend_for(node)
    request = ChatRequest(
        messages=(
            Message(role="system", content=load_prompt("verifier"), node_id=node.id),
            Message(
                role="user",
                content=f"Task:\n{task}\n\nProposed answer:\n{answer}",
                node_id=node.id,
            ),
        ),
        node_id=node.id,
    )
    try:
        response = with_retry(env.retry, lambda: backend.complete(request), log=env.log, node_id=node.id)
    except (RetriesExhausted, NonretryableFailure) as exc:
        return VERDICT_REVISE, f"verifier unavailable ({exc}); treat the answer as unconfirmed and recheck it"
    lines = [line.strip() for line in response.message.content.strip().splitlines() if line.strip()]
    first = lines[0] if lines else ""
    feedback = "\n".join(lines[1:])
    if first == "ACCEPT":
        return VERDICT_ACCEPT, feedback
    if first == "REVISE":
        return VERDICT_REVISE, feedback or "the verifier asked for a revision without details"
    return VERDICT_REVISE, "verifier verdict was unparseable; expected first line ACCEPT or REVISE"


def run_verification_loop(node: AgentNodeSpec, task: str, env: RunEnv) -> VerificationTrace:
    """Generator/verifier loop with early stop on acceptance.

    Each round: a fresh full generator run on the (feedback-augmented)
    task, then one verifier verdict.  Generator or verifier faults count as
    ``revise`` rounds with fault feedback.  The loop never exceeds the
    configured round budget; exhausting it leaves the last proposal as the
    final answer, flagged unverified.
    """
    config = node.heavy_mode
    assert config is not None and config.policy == "verification", "verification loop requires the policy"
    budget = config.rounds

    rounds: list[VerificationRound] = []
    current_task = task
    final_raw = ""
    verified = False
    any_generated = False

    for round_index in range(1, budget + 1):
        if not env.budgets.try_consume_round(node.id):
            break
        gen_node = replace(node, heavy_mode=None, input_processor=False, output_processor=False)
        state = AgentState(node=gen_node, task=current_task)
        run_agent(state, env)
        raw = state.final_text
        generated = state.status == STATUS_FINISHED and bool(raw.strip())

        if not generated:
            verdict, feedback = (
                VERDICT_REVISE,
                f"the generator produced no usable answer (status {state.status}); retry the task",
            )
        else:
            any_generated = True
            final_raw = raw
            verdict, feedback = _verifier_verdict(node, task, raw, env)

        env.log.emit(
            "verification-round",
            node.id,
            {
                "round": round_index,
                "verdict": verdict,
                "answer_digest": sha256_hex(canonicalize_answer(raw))[:16],
            },
        )
        rounds.append(VerificationRound(answer=canonicalize_answer(raw), verdict=verdict, feedback=feedback))

        if verdict == VERDICT_ACCEPT and generated:
            verified = True
            break
        current_task = (
            f"{task}\n\nReviewer feedback (round {round_index}): {feedback}\n"
            "Revise your answer, addressing the feedback."
        )

    return VerificationTrace(
        rounds=tuple(rounds),
        stopped_early=verified and len(rounds) < budget,
        final=final_raw,
        verified=verified,
        all_rounds_failed=not any_generated,
    )


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------


def _run_policy(node: AgentNodeSpec, task: str, env: RunEnv) -> str:
    assert node.heavy_mode is not None
    if node.heavy_mode.policy == "ensemble":
        candidates = run_ensemble(node, task, env)
        vote = aggregate_votes(candidates, mode="weighted")
        for candidate in candidates:
            if candidate.status == "ok" and candidate.answer == vote.winner:
                return candidate.raw_answer
        return vote.winner  # unreachable in practice; the winner came from a candidate
    trace = run_verification_loop(node, task, env)
    return trace.final


def run_node_task(node: AgentNodeSpec, task: str, env: RunEnv, depth: int = 0) -> tuple[str, AgentState | None]:
    """Run a node on a task, honoring its heavy-mode policy and trigger.

    Returns ``(final_text, state)`` where ``state`` is the plain-run agent
    state, or ``None`` when a heavy policy produced the answer (there is no
    single transcript in that case).
    """
    heavy = node.heavy_mode
    if heavy is not None and heavy.trigger == "always":
        return _run_policy(node, task, env), None

    state = AgentState(node=node, task=task, depth=depth)
    run_agent(state, env)

    if heavy is not None and heavy.trigger == "sentinel":
        signaled = any(HEAVY_SENTINEL in record.response.content for record in state.transcript)
        if maybe_activate_heavy(node, model_output=HEAVY_SENTINEL if signaled else ""):
            return _run_policy(node, task, env), None

    return state.final_text, state
