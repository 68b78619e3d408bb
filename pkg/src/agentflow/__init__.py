"""Agent-graph orchestration runtime.

Declarative multi-agent graphs over swappable model backends, with a
strict single-call tool grammar, typed fault isolation, retry/fallback
robustness, ensemble and verification reasoning modes, and event-sourced
runs that can be checkpointed, resumed, and replayed deterministically.
"""
from .backend import (
    BackendFailure,
    BackendProfile,
    ChatRequest,
    ChatResponse,
    FailureClass,
    NonretryableFailure,
    RetriesExhausted,
    RetryPolicy,
    ScriptedBackend,
    build_backend,
    classify_failure,
    with_retry,
)
from .controller import (
    BudgetTracker,
    Checkpoint,
    LogCorrupt,
    ManifestMismatch,
    RunManifest,
    RunStore,
    StorageError,
    WallClockExceeded,
    checkpoint_write,
    enforce_budget,
    execute_task,
    replay_run,
    resume_from_checkpoint,
)
from .events import EventLog, EventLogEntry, canonical_json, sha256_hex
from .graph import (
    AgentGraphSpec,
    AgentNodeSpec,
    BudgetSpec,
    EnsembleMember,
    GraphSpecError,
    HeavyModeSpec,
    ValidationReport,
    delegation_closure,
    load_graph_spec,
    parse_graph_spec,
    serialize_graph_spec,
    validate_graph,
)
from .harness import (
    FaultInjection,
    ScenarioError,
    ScenarioReport,
    ScenarioSpec,
    evaluate_answer,
    load_scenario,
    report_summary,
    run_scenario,
)
from .heavy import aggregate_votes, run_ensemble, run_node_task, run_verification_loop
from .messages import (
    Message,
    NormalizedTask,
    StructuredAnswer,
    TurnRecord,
    canonicalize_answer,
    extract_boxed_answer,
)
from .processors import augment_query, synthesize_output
from .runtime import AgentState, RunEnv, run_agent
from .tools import (
    FaultArtifact,
    ToolContract,
    ToolFault,
    ToolInvocation,
    ToolOutcome,
    ToolRegistry,
    invoke_tool,
    parse_tool_call,
    register_builtin_stubs,
)

__version__ = "0.1.0"

__all__ = [
    "AgentGraphSpec",
    "AgentNodeSpec",
    "AgentState",
    "BackendFailure",
    "BackendProfile",
    "BudgetSpec",
    "BudgetTracker",
    "ChatRequest",
    "ChatResponse",
    "Checkpoint",
    "EnsembleMember",
    "EventLog",
    "EventLogEntry",
    "FailureClass",
    "FaultArtifact",
    "FaultInjection",
    "GraphSpecError",
    "HeavyModeSpec",
    "LogCorrupt",
    "ManifestMismatch",
    "Message",
    "NonretryableFailure",
    "NormalizedTask",
    "RetriesExhausted",
    "RetryPolicy",
    "RunEnv",
    "RunManifest",
    "RunStore",
    "ScenarioError",
    "ScenarioReport",
    "ScenarioSpec",
    "ScriptedBackend",
    "StorageError",
    "StructuredAnswer",
    "ToolContract",
    "ToolFault",
    "ToolInvocation",
    "ToolOutcome",
    "ToolRegistry",
    "TurnRecord",
    "ValidationReport",
    "WallClockExceeded",
    "aggregate_votes",
    "augment_query",
    "build_backend",
    "canonical_json",
    "canonicalize_answer",
    "checkpoint_write",
    "classify_failure",
    "delegation_closure",
    "enforce_budget",
    "evaluate_answer",
    "execute_task",
    "extract_boxed_answer",
    "invoke_tool",
    "load_graph_spec",
    "load_scenario",
    "parse_graph_spec",
    "parse_tool_call",
    "register_builtin_stubs",
    "replay_run",
    "report_summary",
    "resume_from_checkpoint",
    "run_agent",
    "run_ensemble",
    "run_node_task",
    "run_scenario",
    "run_verification_loop",
    "serialize_graph_spec",
    "sha256_hex",
    "synthesize_output",
    "validate_graph",
    "with_retry",
]
