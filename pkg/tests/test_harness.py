"""Tests for scenario loading, fault injection, grading, and reporting."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from agentflow.backend import (
    BackendFailure,
    BackendProfile,
    ChatRequest,
    FailureClass,
    ScriptedBackend,
)
from agentflow.harness import (
    ExpectedOutcome,
    FaultInjection,
    InjectingBackend,
    ScenarioError,
    ScenarioReport,
    _ArmedFault,
    _InjectedToolImpl,
    build_scenario_env,
    evaluate_answer,
    load_scenario,
    parse_fault_injection,
    render_summary_lines,
    report_summary,
    run_scenario,
)
from agentflow.messages import Message, canonicalize_answer
from agentflow.tools import ToolFault

from conftest import SCENARIOS_DIR, rule, tool_call


# ---------------------------------------------------------------------------
# Scenario fixture builder
# ---------------------------------------------------------------------------


def _default_graph() -> dict:
    return {
        "entry": "solo",
        "nodes": {
            "solo": {
                "description": "Answers a counting question.",
                "prompt": "You count crates.",
                "backend": "main",
                "input_processor": False,
                "output_processor": False,
                "max_turns": 5,
            }
        },
    }


def _default_script() -> list:
    return [{"match": {"substring": ""}, "response": "Final Answer: \\boxed{9}"}]


def _default_scenario() -> dict:
    return {
        "name": "mini",
        "query": "How many crates are on the dock?",
        "graph": "graph.json",
        "backends": [{"id": "main", "kind": "scripted", "script": "main.script.json"}],
        "expected": {"answer": "9", "format_tag": "integer"},
    }


def write_scenario(
    tmp_path: Path,
    *,
    scenario: dict | None = None,
    graph: dict | None = None,
    script: list | None = None,
    extra: dict[str, str] | None = None,
) -> Path:
    base = tmp_path / "scn"
    base.mkdir(exist_ok=True)
    (base / "graph.json").write_text(json.dumps(graph or _default_graph()), encoding="utf-8")
    (base / "main.script.json").write_text(json.dumps(script if script is not None else _default_script()), encoding="utf-8")
    for name, text in (extra or {}).items():
        (base / name).write_text(text, encoding="utf-8")
    path = base / "scenario.json"
    path.write_text(json.dumps(scenario or _default_scenario()), encoding="utf-8")
    return path


def _mutated(mutate) -> dict:
    doc = _default_scenario()
    mutate(doc)
    return doc


# ---------------------------------------------------------------------------
# load_scenario
# ---------------------------------------------------------------------------


def test_load_scenario_happy_path(tmp_path):
    doc = _default_scenario()
    doc["search_corpus"] = "corpus.json"
    doc["files_root"] = "files"
    doc["seed"] = 3
    (tmp_path / "scn" / "files").mkdir(parents=True)
    path = write_scenario(
        tmp_path,
        scenario=doc,
        extra={"corpus.json": json.dumps([{"keywords": ["crates"], "content": "nine crates"}])},
    )
    spec = load_scenario(path)
    assert spec.name == "mini"
    assert spec.query.startswith("How many crates")
    assert list(spec.graph.nodes) == ["solo"]
    assert [p.id for p in spec.backend_profiles] == ["main"]
    assert spec.expected == ExpectedOutcome(answer="9", format_tag="integer")
    assert spec.search_corpus == [{"keywords": ["crates"], "content": "nine crates"}]
    assert spec.files_root == tmp_path / "scn" / "files"
    assert spec.seed == 3
    assert spec.builtin_tools is True
    assert spec.injected_faults == []


def test_load_scenario_rejects_unreadable_and_unparseable_files(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ScenarioError, match="not valid JSON"):
        load_scenario(bad)
    array = tmp_path / "array.json"
    array.write_text("[]", encoding="utf-8")
    with pytest.raises(ScenarioError, match="must be a JSON object"):
        load_scenario(array)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d: d.update(surprise=1), "unknown keys"),
        (lambda d: d.pop("query"), "missing required key 'query'"),
        (lambda d: d.update(backends=[]), "non-empty list"),
        (lambda d: d.update(backends="main"), "non-empty list"),
        (lambda d: d.update(backends=[{"kind": "scripted"}]), r"backends\[0\]"),
        (
            lambda d: d.update(
                backends=[
                    {"id": "main", "kind": "scripted", "script": "main.script.json"},
                    {"id": "main", "kind": "scripted", "script": "main.script.json"},
                ]
            ),
            "duplicate backend profile ids",
        ),
        (
            lambda d: d.update(backends=[{"id": "other", "kind": "scripted", "script": "main.script.json"}]),
            r"undefined backends \['main'\]",
        ),
        (lambda d: d.update(expected="9"), "'expected' must be an object"),
        (lambda d: d.update(expected={"answer": "9", "confidence": 1}), "unknown keys"),
        (lambda d: d.update(expected={"answer": ""}), "non-empty string"),
        (lambda d: d.update(expected={"answer": "Nine"}), "is not canonical"),
        (lambda d: d.update(expected={"answer": "9", "format_tag": 7}), "format_tag"),
        (lambda d: d.update(expected={"answer": "9", "status": "crashed"}), "expected.status"),
        (lambda d: d.update(search_corpus={"a": 1}), "must be a list"),
        (lambda d: d.update(search_corpus="missing-corpus.json"), "cannot load search corpus"),
        (lambda d: d.update(judge_backend="nonexistent"), "not a declared profile"),
    ],
)
def test_load_scenario_rejections(tmp_path, mutate, message):
    path = write_scenario(tmp_path, scenario=_mutated(mutate))
    with pytest.raises(ScenarioError, match=message):
        load_scenario(path)


def test_load_scenario_non_canonical_answer_suggests_the_fix(tmp_path):
    path = write_scenario(tmp_path, scenario=_mutated(lambda d: d.update(expected={"answer": "Nine"})))
    with pytest.raises(ScenarioError, match="write it as 'nine'"):
        load_scenario(path)


def test_load_scenario_rejects_invalid_graphs(tmp_path):
    graph = _default_graph()
    graph["budgets"] = {"max_spawned_agents": 0}
    path = write_scenario(tmp_path, graph=graph)
    with pytest.raises(ScenarioError, match="graph is invalid"):
        load_scenario(path)


def test_load_scenario_rejects_bad_scripts(tmp_path):
    path = write_scenario(tmp_path, script=[{"match": {"telepathy": "x"}, "response": "y"}])
    spec_error = None
    try:
        spec = load_scenario(path)
        build_scenario_env(spec)
    except Exception as exc:  # noqa: BLE001 - asserting on the type below
        spec_error = exc
    assert spec_error is not None


# ---------------------------------------------------------------------------
# Fault-injection parsing
# ---------------------------------------------------------------------------


def test_parse_fault_injection_accepts_both_trigger_styles():
    ordinal = parse_fault_injection(
        {"target": "backend:main", "trigger": 2, "repeat": "persistent", "fault": {"class": "timeout"}}, 0
    )
    assert ordinal == FaultInjection(
        target="backend:main", fault={"class": "timeout"}, trigger=2, match=None, repeat="persistent"
    )
    matched = parse_fault_injection(
        {"target": "tool:srv/t", "match": "paris", "fault": {"fault_type": "transient-failure"}}, 0
    )
    assert matched.match == "paris"
    assert matched.repeat == 1


@pytest.mark.parametrize(
    "raw, message",
    [
        ("nope", "must be an object"),
        ({"target": "backend:main", "trigger": 1, "fault": {"class": "timeout"}, "color": "red"}, "unknown keys"),
        ({"target": "main", "trigger": 1, "fault": {"class": "timeout"}}, "'target' must start with"),
        ({"trigger": 1, "fault": {"class": "timeout"}}, "'target' must start with"),
        ({"target": "backend:main", "trigger": 1, "fault": "timeout"}, "'fault' must be an object"),
        ({"target": "backend:main", "trigger": 1, "fault": {}}, "exactly one of"),
        (
            {"target": "backend:main", "trigger": 1, "fault": {"class": "timeout", "payload": "x"}},
            "exactly one of",
        ),
        ({"target": "tool:srv/t", "trigger": 1, "fault": {"class": "timeout"}}, "backend targets only"),
        ({"target": "backend:main", "trigger": 1, "fault": {"fault_type": "transient-failure"}}, "tool targets only"),
        ({"target": "backend:main", "trigger": 1, "fault": {"class": "catastrophic"}}, "unknown failure class"),
        ({"target": "tool:srv/t", "trigger": 1, "fault": {"fault_type": "gremlins"}}, "unknown fault type"),
        ({"target": "backend:main", "fault": {"class": "timeout"}}, "exactly one of 'trigger'"),
        ({"target": "backend:main", "trigger": 1, "match": "x", "fault": {"class": "timeout"}}, "exactly one of 'trigger'"),
        ({"target": "backend:main", "trigger": 0, "fault": {"class": "timeout"}}, "positive call ordinal"),
        ({"target": "backend:main", "trigger": True, "fault": {"class": "timeout"}}, "positive call ordinal"),
        ({"target": "backend:main", "match": 7, "fault": {"class": "timeout"}}, "'match' must be a string"),
        ({"target": "backend:main", "trigger": 1, "repeat": 0, "fault": {"class": "timeout"}}, "'repeat'"),
        ({"target": "backend:main", "trigger": 1, "repeat": "sometimes", "fault": {"class": "timeout"}}, "'repeat'"),
    ],
)
def test_parse_fault_injection_rejections(raw, message):
    with pytest.raises(ScenarioError, match=message):
        parse_fault_injection(raw, 3)
    if not isinstance(raw, str):
        with pytest.raises(ScenarioError, match=r"injected_faults\[3\]"):
            parse_fault_injection(raw, 3)


# ---------------------------------------------------------------------------
# Firing semantics
# ---------------------------------------------------------------------------


def test_armed_fault_ordinal_trigger_counts_shots():
    armed = _ArmedFault(FaultInjection(target="backend:b", fault={"class": "timeout"}, trigger=2, repeat=2))
    assert [armed.should_fire(n, "") for n in (1, 2, 3, 4)] == [False, True, True, False]


def test_armed_fault_persistent_never_runs_out():
    armed = _ArmedFault(
        FaultInjection(target="backend:b", fault={"class": "timeout"}, trigger=1, repeat="persistent")
    )
    assert all(armed.should_fire(n, "") for n in range(1, 20))


def test_armed_fault_match_trigger_inspects_the_request():
    armed = _ArmedFault(FaultInjection(target="backend:b", fault={"class": "timeout"}, match="paris", repeat=1))
    assert armed.should_fire(1, "ask about london") is False
    assert armed.should_fire(2, "ask about paris") is True
    assert armed.should_fire(3, "ask about paris") is False  # single shot spent


def test_armed_fault_state_round_trip():
    armed = _ArmedFault(FaultInjection(target="backend:b", fault={"class": "timeout"}, trigger=1, repeat=3))
    armed.should_fire(1, "")
    assert armed.state() == 2
    clone = _ArmedFault(FaultInjection(target="backend:b", fault={"class": "timeout"}, trigger=1, repeat=3))
    clone.restore(armed.state())
    assert clone.state() == 2


def _scripted(rules, profile_id="main") -> ScriptedBackend:
    return ScriptedBackend(BackendProfile(id=profile_id, kind="scripted"), rules)


def _request(text: str) -> ChatRequest:
    return ChatRequest(messages=(Message(role="user", content=text),), node_id="n")


def test_injecting_backend_payload_fault_overrides_the_reply():
    backend = InjectingBackend(
        _scripted([rule("", "scripted reply")]),
        [FaultInjection(target="backend:main", fault={"payload": "garbled <tool"}, trigger=1, repeat=1)],
    )
    first = backend.complete(_request("hello"))
    assert first.message.content == "garbled <tool"
    assert first.message.role == "assistant"
    second = backend.complete(_request("hello"))
    assert second.message.content == "scripted reply"


def test_injecting_backend_class_fault_raises_typed_failures():
    backend = InjectingBackend(
        _scripted([rule("", "ok")]),
        [FaultInjection(target="backend:main", fault={"class": "rate-limit"}, trigger=2, repeat=1)],
    )
    assert backend.complete(_request("a")).message.content == "ok"
    with pytest.raises(BackendFailure) as exc_info:
        backend.complete(_request("b"))
    assert exc_info.value.failure_class == FailureClass.RATE_LIMIT
    assert exc_info.value.detail == "injected rate-limit fault"
    assert backend.complete(_request("c")).message.content == "ok"


def test_injecting_backend_custom_detail_and_state_round_trip():
    def fresh():
        return InjectingBackend(
            _scripted([rule("", "ok")]),
            [FaultInjection(target="backend:main", fault={"class": "timeout", "detail": "cable cut"}, trigger=1, repeat=2)],
        )

    backend = fresh()
    with pytest.raises(BackendFailure, match="cable cut"):
        backend.complete(_request("a"))
    snapshot = backend.state()
    assert snapshot["calls"] == 1
    assert snapshot["injections"] == [1]

    restored = fresh()
    restored.restore(snapshot)
    with pytest.raises(BackendFailure):  # one shot left
        restored.complete(_request("b"))
    assert restored.complete(_request("c")).message.content == "ok"


def test_injected_tool_impl_fires_on_arguments():
    calls = []

    def inner(arguments):
        calls.append(arguments)
        return "real result"

    impl = _InjectedToolImpl(
        inner,
        [
            FaultInjection(target="tool:srv/t", fault={"fault_type": "permanent-failure"}, match='"city":"paris"', repeat=1),
            FaultInjection(target="tool:srv/t", fault={"payload": "forged"}, match='"city":"lyon"', repeat=1),
        ],
    )
    assert impl({"city": "nice"}) == "real result"
    with pytest.raises(ToolFault) as exc_info:
        impl({"city": "paris"})
    assert exc_info.value.fault_type == "permanent-failure"
    assert impl({"city": "lyon"}) == "forged"
    assert impl({"city": "paris"}) == "real result"  # the shot was spent
    assert len(calls) == 2


# ---------------------------------------------------------------------------
# Environment assembly
# ---------------------------------------------------------------------------


def test_build_scenario_env_wires_backends_and_tools(tmp_path):
    spec = load_scenario(write_scenario(tmp_path))
    env = build_scenario_env(spec)
    assert isinstance(env.backends["main"], ScriptedBackend)
    assert env.deterministic is True
    assert "tool-echo/echo" in env.registry
    assert env.backend_profiles["main"].kind == "scripted"


def test_build_scenario_env_wraps_faulted_backends(tmp_path):
    doc = _default_scenario()
    doc["injected_faults"] = [
        {"target": "backend:main", "trigger": 1, "fault": {"class": "timeout"}}
    ]
    spec = load_scenario(write_scenario(tmp_path, scenario=doc))
    env = build_scenario_env(spec)
    assert isinstance(env.backends["main"], InjectingBackend)


def test_build_scenario_env_rejects_faults_on_unknown_targets(tmp_path):
    doc = _default_scenario()
    doc["injected_faults"] = [{"target": "backend:ghost", "trigger": 1, "fault": {"class": "timeout"}}]
    spec = load_scenario(write_scenario(tmp_path, scenario=doc))
    with pytest.raises(ScenarioError, match="unknown backends \\['ghost'\\]"):
        build_scenario_env(spec)

    doc["injected_faults"] = [
        {"target": "tool:ghost/none", "trigger": 1, "fault": {"fault_type": "transient-failure"}}
    ]
    spec = load_scenario(write_scenario(tmp_path, scenario=doc))
    with pytest.raises(ScenarioError, match="unknown tool 'ghost/none'"):
        build_scenario_env(spec)


def test_build_scenario_env_can_disable_builtin_tools(tmp_path):
    doc = _default_scenario()
    doc["builtin_tools"] = False
    spec = load_scenario(write_scenario(tmp_path, scenario=doc))
    env = build_scenario_env(spec)
    assert "tool-echo/echo" not in env.registry


# ---------------------------------------------------------------------------
# Grading
# ---------------------------------------------------------------------------


def test_evaluate_answer_exact_is_canonical():
    assert evaluate_answer("  9 ", "9", "integer") == (True, "exact")
    assert evaluate_answer("The Answer", "the answer") == (True, "exact")
    assert evaluate_answer("8", "9", "integer") == (False, "mismatch")


def test_evaluate_answer_consults_the_judge_on_mismatch():
    accept_judge = _scripted([rule("Candidate answer:", "ACCEPT")], profile_id="judge")
    assert evaluate_answer("nine", "9", None, accept_judge) == (True, "judge-accepted")

    reject_judge = _scripted([rule("Candidate answer:", "REJECT\ntoo vague")], profile_id="judge")
    assert evaluate_answer("nine", "9", None, reject_judge) == (False, "judge-rejected")


def test_evaluate_answer_reports_judge_outages():
    dead_judge = _scripted([], profile_id="judge")
    accepted, method = evaluate_answer("nine", "9", None, dead_judge)
    assert accepted is False
    assert method.startswith("judge-unavailable")


def test_evaluate_answer_judge_request_shape():
    seen = []

    class _Spy:
        def complete(self, request):
            seen.append(request)
            return _scripted([rule("", "ACCEPT")]).complete(request)

    evaluate_answer("nine", "9", None, _Spy())
    (request,) = seen
    assert request.node_id == "judge"
    assert request.messages[0].role == "system"
    assert "Expected answer:\n9" in request.messages[1].content
    assert "Candidate answer:\nnine" in request.messages[1].content


# ---------------------------------------------------------------------------
# run_scenario
# ---------------------------------------------------------------------------


def test_run_scenario_grades_a_passing_scenario(tmp_path):
    doc = _default_scenario()
    doc["expected"]["event_kinds"] = ["turn"]
    spec = load_scenario(write_scenario(tmp_path, scenario=doc))
    report = run_scenario(spec, reps=2)
    assert report.passed is True
    assert report.failures == []
    assert report.reps == 2
    assert report.answer == "9"
    assert report.method == "exact"
    assert report.status == "finished"
    assert report.kind_counts["turn"] == 1
    assert len(report.log_digest) == 64


def test_run_scenario_repetitions_share_one_digest(tmp_path):
    spec = load_scenario(write_scenario(tmp_path))
    solo = run_scenario(spec, reps=1)
    trio = run_scenario(spec, reps=3)
    assert trio.passed is True
    assert trio.log_digest == solo.log_digest


def test_run_scenario_flags_answer_mismatches(tmp_path):
    doc = _default_scenario()
    doc["expected"]["answer"] = "11"
    spec = load_scenario(write_scenario(tmp_path, scenario=doc))
    report = run_scenario(spec)
    assert report.passed is False
    assert any("answer mismatch (mismatch)" in f for f in report.failures)
    assert report.expected_answer == "11"


def test_run_scenario_flags_status_and_event_kind_mismatches(tmp_path):
    graph = _default_graph()
    graph["nodes"]["solo"]["max_turns"] = 1
    doc = _default_scenario()
    doc["expected"] = {"answer": "i keep thinking", "event_kinds": ["delegation"]}
    spec = load_scenario(write_scenario(tmp_path, scenario=doc, graph=graph, script=[
        {"match": {"substring": ""}, "response": "I keep thinking."}
    ]))
    report = run_scenario(spec)
    assert report.passed is False
    assert any("status mismatch: expected 'finished', got 'turn-limit'" in f for f in report.failures)
    assert any("expected event kinds never occurred: ['delegation']" in f for f in report.failures)


def test_run_scenario_accepts_expected_early_stops(tmp_path):
    graph = _default_graph()
    graph["nodes"]["solo"]["max_turns"] = 1
    doc = _default_scenario()
    doc["expected"] = {"answer": "i keep thinking", "status": "turn-limit"}
    spec = load_scenario(write_scenario(tmp_path, scenario=doc, graph=graph, script=[
        {"match": {"substring": ""}, "response": "I keep thinking."}
    ]))
    report = run_scenario(spec)
    assert report.passed is True
    assert report.status == "turn-limit"


def test_run_scenario_detects_nondeterministic_answers(tmp_path, monkeypatch):
    from agentflow.messages import StructuredAnswer

    spec = load_scenario(write_scenario(tmp_path))
    serial = iter(range(100))

    def flaky_execute(graph, query, env, store=None, *, run_id=None, seed=0, checkpoint_every=1):
        return StructuredAnswer(final_answer=str(next(serial)))

    monkeypatch.setattr("agentflow.harness.execute_task", flaky_execute)
    report = run_scenario(spec, reps=2)
    assert report.passed is False
    assert any("repetitions disagree on the answer" in f for f in report.failures)


def test_run_scenario_persists_run_directories(tmp_path):
    spec = load_scenario(write_scenario(tmp_path))
    runs_root = tmp_path / "runs"
    report = run_scenario(spec, reps=2, runs_root=runs_root)
    assert report.passed is True
    for rep in (1, 2):
        run_dir = runs_root / f"mini-rep{rep}"
        assert (run_dir / "manifest.json").exists()
        assert (run_dir / "events.jsonl").exists()
        assert (run_dir / "result.json").exists()
        assert json.loads((run_dir / "result.json").read_text())["status"] == "finished"


def test_run_scenario_uses_the_judge_for_paraphrased_answers(tmp_path):
    doc = _default_scenario()
    doc["backends"].append({"id": "grader", "kind": "scripted", "script": "judge.script.json"})
    doc["judge_backend"] = "grader"
    doc["expected"] = {"answer": "nine crates"}
    spec = load_scenario(
        write_scenario(
            tmp_path,
            scenario=doc,
            extra={"judge.script.json": json.dumps([{"match": {"substring": "Candidate answer:"}, "response": "ACCEPT"}])},
        )
    )
    report = run_scenario(spec)
    assert report.passed is True
    assert report.method == "judge-accepted"


def test_run_scenario_fault_injection_forces_a_tool_fallback(tmp_path):
    graph = _default_graph()
    graph["nodes"]["solo"]["tools"] = ["tool-searching/search_primary"]
    doc = _default_scenario()
    doc["search_corpus"] = [{"keywords": ["crates"], "result": "There are 9 crates."}]
    doc["injected_faults"] = [
        {
            "target": "tool:tool-searching/search_primary",
            "trigger": 1,
            "repeat": 1,
            "fault": {"fault_type": "permanent-failure", "detail": "index shard offline"},
        }
    ]
    doc["expected"]["event_kinds"] = ["turn", "tool-attempt", "fallback"]
    script = [
        {"match": {"substring": "There are 9 crates."}, "response": "Final Answer: \\boxed{9}"},
        {
            "match": {"substring": ""},
            "response": "Searching.\n" + tool_call("tool-searching", "search_primary", query="crates"),
        },
    ]
    spec = load_scenario(write_scenario(tmp_path, scenario=doc, graph=graph, script=script))
    report = run_scenario(spec, reps=2)
    assert report.passed is True, report.failures
    assert report.kind_counts["fallback"] == 1


def test_run_scenario_backend_payload_injection_exercises_malformed_recovery(tmp_path):
    doc = _default_scenario()
    doc["injected_faults"] = [
        {
            "target": "backend:main",
            "trigger": 1,
            "repeat": 1,
            "fault": {"payload": "<use_mcp_tool>\n<server_name>x</server_name>"},
        }
    ]
    doc["expected"]["event_kinds"] = ["turn", "fault"]
    script = [
        {"match": {"substring": "[fault:malformed-call]"}, "response": "Final Answer: \\boxed{9}"},
        {"match": {"substring": ""}, "response": "Final Answer: \\boxed{999}"},
    ]
    spec = load_scenario(write_scenario(tmp_path, scenario=doc, script=script))
    report = run_scenario(spec, reps=2)
    assert report.passed is True, report.failures
    assert report.kind_counts["turn"] == 2


def test_bundled_scenarios_all_load(tmp_path):
    paths = sorted(SCENARIOS_DIR.glob("*/scenario.json"))
    assert len(paths) == 7
    for path in paths:
        spec = load_scenario(path)
        assert spec.expected.answer


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def _report(name: str, passed: bool, failures: list[str] | None = None) -> ScenarioReport:
    return ScenarioReport(
        name=name,
        passed=passed,
        reps=1,
        answer="9",
        expected_answer="9" if passed else "11",
        method="exact" if passed else "mismatch",
        status="finished",
        expected_status="finished",
        log_digest="d" * 64,
        kind_counts={"turn": 1},
        failures=failures or [],
    )


def test_scenario_report_round_trip():
    report = _report("mini", False, failures=["answer mismatch"])
    assert ScenarioReport.from_dict(report.to_dict()) == report


def test_render_summary_lines_formats_verdicts():
    lines = render_summary_lines([_report("good", True), _report("bad", False, ["answer mismatch (mismatch)"])])
    assert lines[0].startswith("PASS good")
    assert lines[1].startswith("FAIL bad")
    assert lines[2].strip().startswith("- answer mismatch")
    assert lines[-1] == "1/2 scenarios passed (50.0%)"


def test_render_summary_lines_empty():
    assert render_summary_lines([]) == ["0/0 scenarios passed (0.0%)"]


def test_report_summary_writes_json_and_text_siblings(tmp_path):
    out = tmp_path / "reports" / "summary.json"
    summary = report_summary([_report("good", True), _report("bad", False, ["boom"])], out)
    assert summary["total"] == 2
    assert summary["passed"] == 1
    assert summary["failed"] == 1
    assert summary["pass_rate"] == 0.5
    assert [s["name"] for s in summary["scenarios"]] == ["good", "bad"]

    on_disk = json.loads(out.read_text(encoding="utf-8"))
    assert on_disk == summary
    text = out.with_suffix(".json.txt").read_text(encoding="utf-8")
    assert "PASS good" in text
    assert "FAIL bad" in text
    assert "1/2 scenarios passed (50.0%)" in text
