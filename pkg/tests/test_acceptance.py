"""End-to-end acceptance checks, one verdict line per criterion.

Each test exercises one acceptance criterion across module boundaries and
prints exactly one ``criterion N (<label>): PASS`` line (or a FAIL line with
the reason, before re-raising).  Run ``pytest tests/test_acceptance.py -s``
to see the verdict lines; timing tolerances are asserted inline.
"""
from __future__ import annotations

import random
import re
import time
from contextlib import contextmanager
from dataclasses import replace
from fractions import Fraction

import pytest

from agentflow.backend import (
    BackendFailure,
    FailureClass,
    RetriesExhausted,
    RetryPolicy,
    ScriptedBackend,
    with_retry,
)
from agentflow.controller import (
    RunStore,
    execute_task,
    replay_run,
    resume_from_checkpoint,
)
from agentflow.events import EventLog
from agentflow.graph import validate_graph
from agentflow.harness import build_scenario_env, load_scenario, run_scenario
from agentflow.heavy import aggregate_votes, run_node_task, run_verification_loop
from agentflow.messages import Evidence, StructuredAnswer, canonicalize_answer
from agentflow.runtime import (
    STATUS_TURN_LIMIT,
    render_system_prompt,
)
from agentflow.tools import (
    ArgumentField,
    MalformedCall,
    MultipleCalls,
    ToolContract,
    isolate_fault,
    parse_tool_call,
    validate_arguments,
)

from conftest import SCENARIOS_DIR, build_env, make_graph, node_dict, rule, tool_call
from test_heavy import _random_candidates, oracle_vote
from test_tools import GRAMMAR_CASES


@contextmanager
def criterion(number: int, label: str):
    """Print one PASS/FAIL verdict line for the wrapped block."""
    try:
        yield
    except BaseException as exc:  # re-raise so pytest still records the failure
        print(f"criterion {number} ({label}): FAIL — {exc}")
        raise
    print(f"criterion {number} ({label}): PASS")


# ---------------------------------------------------------------------------
# Criterion 1 — random acyclic graphs validate; one added back-edge is
# rejected with a cycle violation.
# ---------------------------------------------------------------------------


def _random_dag_nodes(rng: random.Random) -> tuple[list[str], dict[str, dict]]:
    """A chain backbone plus random extra forward edges: acyclic by construction,
    and every node is reachable from the entry."""
    count = rng.randint(3, 9)
    names = [f"a{j}" for j in range(count)]
    raw: dict[str, dict] = {}
    for j, name in enumerate(names):
        subs = []
        if j + 1 < count:
            subs.append(names[j + 1])
        for candidate in names[j + 2 :]:
            if rng.random() < 0.3:
                subs.append(candidate)
        raw[name] = node_dict(sub_agents=subs)
    return names, raw


def test_criterion_1_validation_separates_dags_from_cycles():
    with criterion(1, "graph validation"):
        rng = random.Random(0xACE001)
        started = time.perf_counter()
        for _ in range(200):
            names, raw = _random_dag_nodes(rng)
            graph = make_graph({k: dict(v) for k, v in raw.items()}, entry=names[0])
            report = validate_graph(graph)
            assert report.ok, report.lines()

            # One extra edge j -> i (i < j) closes a cycle through the chain.
            j = rng.randrange(1, len(names))
            i = rng.randrange(j)
            broken = {k: dict(v) for k, v in raw.items()}
            broken[names[j]] = dict(
                broken[names[j]],
                sub_agents=[*raw[names[j]]["sub_agents"], names[i]],
            )
            bad_report = validate_graph(make_graph(broken, entry=names[0]))
            assert not bad_report.ok
            assert bad_report.of_kind("cycle"), bad_report.lines()
        assert time.perf_counter() - started < 5.0


# ---------------------------------------------------------------------------
# Criterion 2 — the documented tool-call shape parses exactly; malformations
# map to typed faults; the full grammar corpus holds.
# ---------------------------------------------------------------------------


def test_criterion_2_tool_grammar_and_fault_typing():
    with criterion(2, "tool-call grammar"):
        template = (
            "<use_mcp_tool>\n"
            "<server_name>server name here</server_name>\n"
            "<tool_name>tool name here</tool_name>\n"
            '<arguments>{"param1": "value1"}</arguments>\n'
            "</use_mcp_tool>"
        )
        call = parse_tool_call(template)
        assert call is not None
        assert call.server_name == "server name here"
        assert call.tool_name == "tool name here"
        assert call.arguments == {"param1": "value1"}

        # The example block embedded in every rendered system prompt parses
        # with the same grammar.
        graph = make_graph({"solo": node_dict(tools=["tool-echo/echo"])})
        env = build_env(graph, {"main": [rule("", "unused")]})
        prompt = render_system_prompt(graph.nodes["solo"], env)
        block = re.search(r"<use_mcp_tool>.*?</use_mcp_tool>", prompt, re.DOTALL)
        assert block is not None
        embedded = parse_tool_call(block.group(0))
        assert embedded is not None
        assert embedded.server_name == "server name here"
        assert embedded.tool_name == "tool name here"
        assert embedded.arguments == {"param": "value"}

        # Malformation 1: unterminated block.
        with pytest.raises(MalformedCall) as unclosed:
            parse_tool_call(template.replace("</use_mcp_tool>", ""))
        assert isolate_fault(unclosed.value).fault_type == "malformed-call"

        # Malformation 2: arguments that are not JSON.
        broken_json = (
            "<use_mcp_tool>\n"
            "<server_name>tool-files</server_name>\n"
            "<tool_name>read_file</tool_name>\n"
            "<arguments>{bad json</arguments>\n"
            "</use_mcp_tool>"
        )
        with pytest.raises(MalformedCall) as bad_args:
            parse_tool_call(broken_json)
        assert isolate_fault(bad_args.value).fault_type == "malformed-call"

        # Malformation 3: well-formed call that violates the tool's contract.
        upload = ToolContract(
            server_name="tool-sandbox",
            tool_name="upload",
            description="Copy a local file into the sandbox.",
            input_schema=(
                ArgumentField("sandbox_id"),
                ArgumentField("local_path"),
                ArgumentField("sandbox_path"),
            ),
        )
        artifact = validate_arguments(
            upload, {"sandbox_id": "sb-1", "sandbox_path": "/inbox/data.txt"}
        )
        assert artifact is not None
        assert artifact.fault_type == "invalid-arguments"
        assert "local_path" in artifact.summary

        # The whole grammar corpus, re-evaluated in one sweep.
        passed = 0
        for text, (kind, detail) in GRAMMAR_CASES:
            try:
                parsed = parse_tool_call(text)
            except MalformedCall as exc:
                ok = kind == "malformed" and re.search(detail, str(exc)) is not None
            except MultipleCalls as exc:
                ok = kind == "multiple" and exc.count == detail
            else:
                if parsed is None:
                    ok = kind == "none"
                else:
                    ok = kind == "call" and (
                        parsed.server_name,
                        parsed.tool_name,
                        parsed.arguments,
                    ) == detail
            passed += ok
        assert passed == len(GRAMMAR_CASES) == 40


# ---------------------------------------------------------------------------
# Criterion 3 — retry discipline is exact: k transient failures under a
# 3-attempt policy succeed iff k < 3, with exact retry events.
# ---------------------------------------------------------------------------


def test_criterion_3_retry_discipline_is_exact():
    with criterion(3, "retry discipline"):
        policy = RetryPolicy(max_attempts=3, deterministic_mode=True)
        for failures in (0, 1, 2, 3):
            log = EventLog()
            calls = {"n": 0}

            def attempt(_failures=failures):
                calls["n"] += 1
                if calls["n"] <= _failures:
                    raise BackendFailure(FailureClass.TIMEOUT, "transient outage")
                return "ok"

            if failures < 3:
                assert with_retry(policy, attempt, log=log, node_id="n0") == "ok"
                events = [e for e in log.entries() if e.kind == "retry"]
                assert len(events) == failures
                assert [e.payload["attempt"] for e in events] == list(range(1, failures + 1))
                assert all(e.payload["will_retry"] for e in events)
                assert calls["n"] == failures + 1
            else:
                with pytest.raises(RetriesExhausted):
                    with_retry(policy, attempt, log=log, node_id="n0")
                events = [e for e in log.entries() if e.kind == "retry"]
                assert [e.payload["attempt"] for e in events] == [1, 2, 3]
                assert [e.payload["will_retry"] for e in events] == [True, True, False]
                assert calls["n"] == 3


# ---------------------------------------------------------------------------
# Criterion 4 — every bundled scenario terminates with its expected canonical
# answer and emits typed fault artifacts, within the time budget.
# ---------------------------------------------------------------------------


def test_criterion_4_bundled_scenarios_pass_with_typed_faults():
    with criterion(4, "bundled scenario battery"):
        paths = sorted(SCENARIOS_DIR.glob("*/scenario.json"))
        assert len(paths) == 7
        started = time.perf_counter()
        for path in paths:
            spec = load_scenario(path)
            report = run_scenario(spec, reps=1)
            assert report.passed, f"{spec.name}: {report.failures}"
            typed_artifacts = sum(
                report.kind_counts.get(kind, 0) for kind in ("fault", "retry", "fallback")
            )
            assert typed_artifacts >= 1, spec.name
        assert time.perf_counter() - started < 30.0


# ---------------------------------------------------------------------------
# Criterion 5 — voting matches a brute-force oracle, is invariant under
# positive weight scaling, and member counts scale the emitted events.
# ---------------------------------------------------------------------------


def test_criterion_5_voting_oracle_and_member_scaling():
    with criterion(5, "ensemble voting"):
        for seed in range(100):
            rng = random.Random(5000 + seed)
            candidates = _random_candidates(rng)
            for mode in ("majority", "weighted"):
                expected_winner, expected_tie = oracle_vote(candidates, mode)
                result = aggregate_votes(candidates, mode=mode)
                assert result.winner == expected_winner, f"mode={mode} seed={seed}"
                assert result.tie_broken == expected_tie

        for seed in range(100):
            rng = random.Random(6000 + seed)
            candidates = _random_candidates(rng)
            scale = Fraction(rng.randint(1, 9), rng.randint(1, 9))
            scaled = [replace(c, weight=c.weight * scale) for c in candidates]
            assert (
                aggregate_votes(scaled, mode="weighted").winner
                == aggregate_votes(candidates, mode="weighted").winner
            )

        for member_count in (2, 4):
            members = [
                {"backend": f"m{i}", "prompt_variant": "default", "weight": 1}
                for i in range(member_count)
            ]
            heavy_mode = {
                "policy": "ensemble",
                "trigger": "always",
                "ensemble_members": members,
            }
            graph = make_graph(
                {"heavy": node_dict("m0", max_turns=3, heavy_mode=heavy_mode)}
            )
            scripts = {
                f"m{i}": [rule("", "Final Answer: \\boxed{42}")]
                for i in range(member_count)
            }
            env = build_env(graph, scripts)
            text, _state = run_node_task(graph.nodes["heavy"], "pick a number", env)
            assert text == "42"
            assert env.log.kind_counts().get("ensemble-member") == member_count


# ---------------------------------------------------------------------------
# Criterion 6 — verification round caps: an always-revising verifier runs
# exactly the configured rounds; an accept stops the loop early.
# ---------------------------------------------------------------------------


def _verification_graph(rounds: int):
    heavy_mode = {"policy": "verification", "trigger": "always", "rounds": rounds}
    return make_graph(
        {"heavy": node_dict(max_turns=3, heavy_mode=heavy_mode)},
        budgets={"max_verification_rounds": rounds},
    )


def test_criterion_6_verification_round_caps():
    with criterion(6, "verification rounds"):
        graph = _verification_graph(10)
        assert validate_graph(graph).ok
        env = build_env(
            graph,
            {
                "main": [
                    rule("Proposed answer:", "REVISE\nstill not convincing"),
                    rule("", "Final Answer: \\boxed{attempt}"),
                ]
            },
        )
        trace = run_verification_loop(graph.nodes["heavy"], "check this", env)
        assert len(trace.rounds) == 10
        assert trace.verified is False
        assert trace.stopped_early is False
        assert env.log.kind_counts()["verification-round"] == 10

        graph2 = _verification_graph(10)
        env2 = build_env(
            graph2,
            {
                "main": [
                    rule("Proposed answer:\nsecond", "ACCEPT"),
                    rule("Proposed answer:", "REVISE\ntry again"),
                    rule("Reviewer feedback (round 1)", "Final Answer: \\boxed{second}"),
                    rule("", "Final Answer: \\boxed{first}"),
                ]
            },
        )
        trace2 = run_verification_loop(graph2.nodes["heavy"], "check this", env2)
        assert len(trace2.rounds) == 2
        assert trace2.verified is True
        assert trace2.stopped_early is True
        assert env2.log.kind_counts()["verification-round"] == 2


# ---------------------------------------------------------------------------
# Criterion 7 — deterministic reproducibility on the two-node delegation
# scenario: identical digests, kill/resume at every turn boundary, and
# replay without consulting any backend.
# ---------------------------------------------------------------------------


class _Kill(RuntimeError):
    pass


def test_criterion_7_determinism_resume_and_replay(tmp_path, monkeypatch):
    with criterion(7, "determinism, resume, replay"):
        spec = load_scenario(SCENARIOS_DIR / "lithograph-year" / "scenario.json")
        assert len(spec.graph.nodes) == 2  # delegation topology

        answers, digests, turn_total = [], [], 0
        for _ in range(2):
            env = build_scenario_env(spec)
            answer = execute_task(spec.graph, spec.query, env, seed=spec.seed)
            answers.append(canonicalize_answer(answer.final_answer))
            digests.append(env.log.digest())
            turn_total = env.log.kind_counts()["turn"]
        assert answers == ["1927", "1927"]
        assert digests[0] == digests[1]
        assert turn_total >= 2

        # Interrupt after every turn; the resumed run reproduces the answer.
        for kill_at in range(1, turn_total + 1):
            run_id = f"kill-{kill_at}"
            store = RunStore(tmp_path / "kills", run_id)
            env = build_scenario_env(spec)
            seen = {"turns": 0}

            def on_turn(_state, _kill_at=kill_at, _seen=seen):
                _seen["turns"] += 1
                if _seen["turns"] == _kill_at:
                    raise _Kill(f"interrupted after turn {_kill_at}")

            env.on_turn = on_turn
            with pytest.raises(_Kill):
                execute_task(
                    spec.graph, spec.query, env, store, run_id=run_id, seed=spec.seed
                )
            resumed = resume_from_checkpoint(
                RunStore.open_existing(tmp_path / "kills", run_id),
                spec.graph,
                build_scenario_env(spec),
            )
            assert canonicalize_answer(resumed.final_answer) == "1927", run_id

        # Replay rebuilds the transcript from the log alone.
        store = RunStore(tmp_path / "full", "golden")
        env = build_scenario_env(spec)
        answer = execute_task(
            spec.graph, spec.query, env, store, run_id="golden", seed=spec.seed
        )
        assert canonicalize_answer(answer.final_answer) == "1927"

        def _no_backend_calls(*_args, **_kwargs):
            raise AssertionError("backend consulted during replay")

        monkeypatch.setattr(ScriptedBackend, "complete", _no_backend_calls)
        records = replay_run(RunStore.open_existing(tmp_path / "full", "golden"))
        assert len(records) == turn_total
        assert "1927" in records[-1].response.content


# ---------------------------------------------------------------------------
# Criterion 8 — turn limits are exact and enforced per node.
# ---------------------------------------------------------------------------


def test_criterion_8_turn_limits_exact_and_per_node():
    with criterion(8, "turn limits"):
        for limit in (1, 5, 20):
            graph = make_graph({"n": node_dict(max_turns=limit)})
            env = build_env(graph, {"main": [rule("", "Deliberating, not done yet.")]})
            _text, state = run_node_task(graph.nodes["n"], "ponder", env)
            assert state is not None
            assert state.status == STATUS_TURN_LIMIT
            assert len(state.transcript) == limit
            assert env.log.kind_counts()["turn"] == limit

        # Parent and child limits are independent.
        graph = make_graph(
            {
                "parent": node_dict(max_turns=2, sub_agents=["helper"]),
                "helper": node_dict(
                    description="Keeps digging.",
                    prompt="You are a helper.",
                    max_turns=5,
                    shared=True,
                ),
            },
            entry="parent",
        )
        delegate = tool_call("agent-helper", "delegate", subtask="dig into the records")
        env = build_env(
            graph,
            {
                "main": [
                    rule("dig into the records", "Working on it, hold on."),
                    rule("", delegate),
                ]
            },
        )
        _text, parent_state = run_node_task(graph.nodes["parent"], "investigate", env)
        assert parent_state is not None
        assert len(parent_state.transcript) == 2
        child_state = env.shared_states["helper"]
        assert len(child_state.transcript) == 5
        assert child_state.status == STATUS_TURN_LIMIT
        per_node: dict[str, int] = {}
        for event in env.log.entries():
            if event.kind == "turn":
                per_node[event.node_id] = per_node.get(event.node_id, 0) + 1
        assert per_node == {"parent": 2, "helper": 5}


# ---------------------------------------------------------------------------
# Criterion 9 — the same task under one-node and two-node topologies yields
# well-formed structured answers with the same canonical content.
# ---------------------------------------------------------------------------


def _assert_well_formed(answer: StructuredAnswer):
    assert isinstance(answer, StructuredAnswer)
    assert isinstance(answer.final_answer, str) and answer.final_answer
    assert isinstance(answer.evidence, tuple) and answer.evidence
    assert all(isinstance(e, Evidence) for e in answer.evidence)
    assert all(e.source.startswith("turn:") for e in answer.evidence)
    assert isinstance(answer.warnings, tuple)
    assert not [w for w in answer.warnings if w.startswith("run stopped early")]
    assert StructuredAnswer.from_dict(answer.to_dict()) == answer


def test_criterion_9_answer_contract_across_topologies():
    with criterion(9, "structured answers across topologies"):
        corpus = [
            {
                "keywords": ["lithograph"],
                "result": "The lithograph was first printed in 1927.",
            }
        ]
        query = "When was the lithograph first printed?"
        search = tool_call("tool-searching", "search_primary", query="lithograph")

        single = make_graph({"solo": node_dict(max_turns=4)})
        env1 = build_env(
            single,
            {
                "main": [
                    rule("first printed in 1927", "Final Answer: \\boxed{1927}"),
                    rule("", search),
                ]
            },
            corpus=corpus,
        )
        one_node = execute_task(single, query, env1)

        duo = make_graph(
            {
                "lead": node_dict(max_turns=4, sub_agents=["digger"]),
                "digger": node_dict(
                    description="Looks facts up.",
                    prompt="You dig up facts.",
                    max_turns=4,
                ),
            },
            entry="lead",
        )
        env2 = build_env(
            duo,
            {
                "main": [
                    rule("first printed in 1927", "Final Answer: \\boxed{1927}"),
                    rule("You dig up facts.", search),
                    rule("1927", "Final Answer: \\boxed{1927}"),
                    rule("", tool_call("agent-digger", "delegate", subtask="find the year")),
                ]
            },
            corpus=corpus,
        )
        two_node = execute_task(duo, query, env2)

        for answer in (one_node, two_node):
            _assert_well_formed(answer)
        assert canonicalize_answer(one_node.final_answer) == "1927"
        assert canonicalize_answer(two_node.final_answer) == "1927"
        assert env2.log.kind_counts()["delegation"] == 1
