"""Command-line interface.

Subcommands:

* ``validate`` — parse a graph file and print every invariant violation.
* ``run`` — execute a query against a graph with configured backends.
* ``scenario`` — run a scenario file end to end and grade it.
* ``replay`` — rebuild a recorded run's transcript from its event log.
* ``report`` — merge scenario records into one summary.

Exit codes: 0 success/pass, 1 failed run or failed expectation or corrupt
log, 2 bad input (unreadable files, invalid config).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any

from .backend import BackendProfile, RetryPolicy, ScriptFormatError, build_backend
from .controller import (
    LogCorrupt,
    RunStore,
    StorageError,
    WallClockExceeded,
    execute_task,
    replay_run,
)
from .graph import GraphSpecError, load_graph_spec, validate_graph
from .harness import (
    ScenarioError,
    ScenarioReport,
    load_scenario,
    render_summary_lines,
    report_summary,
    run_scenario,
)
from .messages import StructuredAnswer
from .runtime import STATUS_FINISHED, RunEnv
from .tools import ToolManifestError, ToolRegistry, load_tool_manifest, register_builtin_stubs

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_BAD_INPUT = 2


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_BAD_INPUT


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _cmd_validate(args: argparse.Namespace) -> int:
    try:
        graph = load_graph_spec(args.graph)
    except (OSError, GraphSpecError) as exc:
        return _fail(str(exc))
    report = validate_graph(graph)
    if report.ok:
        print(f"OK: {len(graph.nodes)} node(s), entry {graph.entry!r}")
        return EXIT_OK
    for line in report.lines():
        print(line)
    return EXIT_FAILED


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _load_profiles(path: str) -> dict[str, BackendProfile]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = data.get("backends", [])
    if not isinstance(data, list):
        raise ValueError("backends file must hold a list of profiles (or {'backends': [...]})")
    profiles = {}
    for raw in data:
        profile = BackendProfile.from_dict(raw)
        profiles[profile.id] = profile
    return profiles


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        graph = load_graph_spec(args.graph)
    except (OSError, GraphSpecError) as exc:
        return _fail(str(exc))
    report = validate_graph(graph)
    if not report.ok:
        for line in report.lines():
            print(line, file=sys.stderr)
        return EXIT_BAD_INPUT

    try:
        profiles = _load_profiles(args.backends)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(f"cannot load backends: {exc}")
    missing = sorted({node.backend for node in graph.nodes.values()} - set(profiles))
    if missing:
        return _fail(f"graph references undefined backends {missing}")

    base_dir = Path(args.backends).parent
    try:
        backends = {pid: build_backend(profile, base_dir=base_dir) for pid, profile in profiles.items()}
    except (ScriptFormatError, OSError) as exc:
        return _fail(str(exc))

    registry = ToolRegistry()
    corpus = None
    if args.corpus:
        try:
            corpus = json.loads(Path(args.corpus).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            return _fail(f"cannot load corpus: {exc}")
    register_builtin_stubs(registry, files_root=args.files_root, search_corpus=corpus)
    if args.tool_manifest:
        try:
            load_tool_manifest(registry, args.tool_manifest, base_dir=Path(args.tool_manifest).parent)
        except ToolManifestError as exc:
            return _fail(str(exc))

    env = RunEnv(
        graph=graph,
        backends=backends,
        registry=registry,
        retry=RetryPolicy(deterministic_mode=args.deterministic),
        deterministic=args.deterministic,
        backend_profiles=profiles,
    )
    try:
        store = RunStore(args.runs_dir, args.run_id) if args.run_id else None
    except StorageError as exc:
        return _fail(str(exc))

    status = STATUS_FINISHED
    try:
        answer: StructuredAnswer = execute_task(
            graph, args.query, env, store, run_id=args.run_id, seed=args.seed
        )
    except WallClockExceeded as exc:
        answer = exc.partial
        status = "budget-stop"
    except StorageError as exc:
        return _fail(str(exc))
    if store is not None:
        recorded = store.read_result()
        if recorded is not None:
            status = str(recorded.get("status", status))
    else:
        early = next((w for w in answer.warnings if w.startswith("run stopped early: ")), None)
        if early is not None:
            status = early.removeprefix("run stopped early: ")

    print(json.dumps({"status": status, **answer.to_dict()}, indent=2, sort_keys=True))
    return EXIT_OK if status == STATUS_FINISHED else EXIT_FAILED


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


def _cmd_scenario(args: argparse.Namespace) -> int:
    try:
        spec = load_scenario(args.spec)
    except ScenarioError as exc:
        return _fail(str(exc))
    try:
        report = run_scenario(spec, reps=args.reps, runs_root=args.runs_dir, deterministic=not args.live)
    except (StorageError, ScenarioError) as exc:
        return _fail(str(exc))
    for line in render_summary_lines([report]):
        print(line)
    if args.out:
        try:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            return _fail(f"cannot write record: {exc}")
    return EXIT_OK if report.passed else EXIT_FAILED


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def _cmd_replay(args: argparse.Namespace) -> int:
    try:
        store = RunStore.open_existing(args.runs_dir, args.run_id)
    except StorageError as exc:
        return _fail(str(exc))
    try:
        records = replay_run(store)
    except LogCorrupt as exc:
        print(f"corrupt: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except StorageError as exc:
        return _fail(str(exc))
    for record in records:
        reply = " ".join(record.response.content.split())
        if len(reply) > 100:
            reply = reply[:97] + "..."
        print(f"[{record.node_id} turn {record.turn_index}] {reply}")
    print(f"replayed {len(records)} turn(s) from the event log (no backend calls)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for record_path in args.records:
        try:
            data = json.loads(Path(record_path).read_text(encoding="utf-8"))
            reports.append(ScenarioReport.from_dict(data))
        except (OSError, ValueError, KeyError) as exc:
            return _fail(f"cannot load record {record_path}: {exc}")
    try:
        report_summary(reports, args.out)
    except StorageError as exc:
        return _fail(str(exc))
    for line in render_summary_lines(reports):
        print(line)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentflow", description="Agent graph orchestration runtime.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a graph file against all structural invariants")
    p_validate.add_argument("graph", help="path to the graph JSON file")
    p_validate.set_defaults(func=_cmd_validate)

    p_run = sub.add_parser("run", help="execute a query against a graph")
    p_run.add_argument("--graph", required=True, help="path to the graph JSON file")
    p_run.add_argument("--query", required=True, help="the user query")
    p_run.add_argument("--backends", required=True, help="JSON file with backend profiles")
    p_run.add_argument("--tool-manifest", help="JSON manifest of scripted tools")
    p_run.add_argument("--corpus", help="JSON search corpus for the builtin search tools")
    p_run.add_argument("--files-root", help="sandbox root for the builtin file tool")
    p_run.add_argument("--deterministic", action="store_true", help="require scripted backends; no retry sleeps")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--runs-dir", default="runs", help="directory for persisted run state")
    p_run.add_argument("--run-id", help="persist the run under this id (requires --runs-dir)")
    p_run.set_defaults(func=_cmd_run)

    p_scenario = sub.add_parser("scenario", help="run one scenario file and grade the outcome")
    p_scenario.add_argument("spec", help="path to the scenario JSON file")
    p_scenario.add_argument("--reps", type=int, default=1, help="repetitions (answers and digests must agree)")
    p_scenario.add_argument("--out", help="write the scenario record JSON here")
    p_scenario.add_argument("--runs-dir", help="persist each repetition's run directory under this root")
    p_scenario.add_argument("--live", action="store_true", help="allow live backends (no determinism checks)")
    p_scenario.set_defaults(func=_cmd_scenario)

    p_replay = sub.add_parser("replay", help="rebuild a recorded run's transcript from its event log")
    p_replay.add_argument("run_id", help="run id under the runs directory")
    p_replay.add_argument("--runs-dir", default="runs")
    p_replay.set_defaults(func=_cmd_replay)

    p_report = sub.add_parser("report", help="merge scenario records into one summary")
    p_report.add_argument("records", nargs="+", help="scenario record JSON files")
    p_report.add_argument("--out", required=True, help="summary JSON output path")
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
