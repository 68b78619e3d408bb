"""Shared fixtures and builders for the test suite."""
from __future__ import annotations

import json
from pathlib import Path

import pytest

from agentflow.backend import BackendProfile, RetryPolicy, ScriptedBackend, ScriptRule
from agentflow.graph import AgentGraphSpec, parse_graph_spec
from agentflow.runtime import RunEnv
from agentflow.tools import ToolRegistry, register_builtin_stubs

SCENARIOS_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def make_graph(nodes: dict, entry: str | None = None, budgets: dict | None = None) -> AgentGraphSpec:
    """Build a graph from plain dicts, going through the real parser."""
    payload: dict = {"entry": entry or next(iter(nodes)), "nodes": nodes}
    if budgets is not None:
        payload["budgets"] = budgets
    return parse_graph_spec(json.dumps(payload))


def node_dict(
    backend: str = "main",
    *,
    description: str = "A test agent.",
    prompt: str = "You are a test agent.",
    **overrides,
) -> dict:
    base = {
        "description": description,
        "prompt": prompt,
        "backend": backend,
        "input_processor": False,
        "output_processor": False,
    }
    base.update(overrides)
    return base


def single_node_graph(backend: str = "main", **overrides) -> AgentGraphSpec:
    return make_graph({"solo": node_dict(backend, **overrides)})


def tool_call(server: str, tool: str, **arguments) -> str:
    return (
        "<use_mcp_tool>\n"
        f"<server_name>{server}</server_name>\n"
        f"<tool_name>{tool}</tool_name>\n"
        f"<arguments>{json.dumps(arguments)}</arguments>\n"
        "</use_mcp_tool>"
    )


def rule(match: str, response: str, *, fail_count: int = 0, fail_class=None) -> ScriptRule:
    kwargs = {"fail_count": fail_count}
    if fail_class is not None:
        kwargs["fail_class"] = fail_class
    return ScriptRule(matcher_kind="substring", pattern=match, response=response, **kwargs)


def build_env(
    graph: AgentGraphSpec,
    scripts: dict[str, list[ScriptRule]],
    *,
    corpus: list[dict] | None = None,
    files_root: str | Path | None = None,
    max_attempts: int = 3,
) -> RunEnv:
    """A deterministic environment with scripted backends and builtin tools."""
    registry = ToolRegistry()
    register_builtin_stubs(registry, files_root=files_root, search_corpus=corpus)
    backends = {}
    profiles = {}
    for backend_id, rules in scripts.items():
        profile = BackendProfile(id=backend_id, kind="scripted")
        backends[backend_id] = ScriptedBackend(profile, rules)
        profiles[backend_id] = profile
    return RunEnv(
        graph=graph,
        backends=backends,
        registry=registry,
        retry=RetryPolicy(max_attempts=max_attempts, deterministic_mode=True),
        deterministic=True,
        backend_profiles=profiles,
    )


@pytest.fixture
def runs_dir(tmp_path: Path) -> Path:
    d = tmp_path / "runs"
    d.mkdir()
    return d
