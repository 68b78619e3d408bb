"""Run controller: manifests, budgets, checkpoints, resume, and replay.

A run is event-sourced: every turn, retry, fault, delegation, ensemble
member, verification round, checkpoint, and budget trip lands in an
append-only JSONL log under ``runs/<run_id>/``.  Checkpoints capture the
full resumable frontier (normalized task, entry agent state, shared child
states, remaining budgets, scripted backend/tool counters), are written
atomically, and are byte-identical when nothing happened in between.
Replay reconstructs the transcript purely from the log — no backend is
ever consulted.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .backend import BackendProfile
from .events import EventLog, canonical_json, read_entries, scrub_volatile, sha256_hex
from .graph import AgentGraphSpec, BudgetSpec, serialize_graph_spec
from .heavy import run_node_task
from .messages import Evidence, NormalizedTask, StructuredAnswer, TurnRecord
from .processors import EmptyTranscriptError, augment_query, synthesize_output
from .prompts import prompt_hashes
from .runtime import (
    STATUS_BUDGET_STOP,
    STATUS_FINISHED,
    STATUS_RUNNING,
    AgentState,
    RunEnv,
    run_agent,
)

logger = logging.getLogger(__name__)

MODES = ("live", "deterministic")

WALL_CLOCK = "wall-clock"
SPAWNED_AGENTS = "spawned-agents"
VERIFICATION_ROUNDS = "verification-rounds"


class StorageError(Exception):
    """A run-store read or write failed."""


class ManifestMismatch(Exception):
    def __init__(self, field_name: str, expected: str, actual: str):
        self.field_name = field_name
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"manifest mismatch on {field_name}: recorded {expected[:16]}..., current {actual[:16]}..."
        )


class LogCorrupt(Exception):
    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"event log corrupt at entry {position}: {reason}")


class ControllerConfigError(Exception):
    """The run configuration is inconsistent (e.g. live backends in deterministic mode)."""


class WallClockExceeded(Exception):
    """The wall-clock budget ran out; carries the partial answer."""

    def __init__(self, partial: StructuredAnswer):
        self.partial = partial
        super().__init__("wall-clock budget exceeded")


# ---------------------------------------------------------------------------
# Budgets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BudgetState:
    spawns_remaining: int
    rounds_remaining: int
    wall_limit: float
    elapsed: float = 0.0


def enforce_budget(state: BudgetState, event_kind: str, elapsed: float | None = None) -> tuple[BudgetState, str | None]:
    """Pure budget step: apply one event, return the next state and a stop reason.

    ``delegation`` and ``ensemble-member`` consume a spawn;
    ``verification-round`` consumes a round; the wall clock is compared on
    every event.  A nonpositive wall limit is exhausted from the start.
    """
    current_elapsed = state.elapsed if elapsed is None else elapsed
    spawns = state.spawns_remaining
    rounds = state.rounds_remaining
    stop: str | None = None
    if event_kind in ("delegation", "ensemble-member"):
        if spawns <= 0:
            stop = SPAWNED_AGENTS
        else:
            spawns -= 1
    elif event_kind == "verification-round":
        if rounds <= 0:
            stop = VERIFICATION_ROUNDS
        else:
            rounds -= 1
    if stop is None and (state.wall_limit <= 0 or current_elapsed > state.wall_limit):
        stop = WALL_CLOCK
    return BudgetState(spawns, rounds, state.wall_limit, current_elapsed), stop


class BudgetTracker:
    """Thread-safe budget enforcement around :func:`enforce_budget`.

    Emits exactly one ``budget`` event per exhausted dimension.  Wall-clock
    elapsed time restarts on resume: only the logical dimensions (spawns,
    rounds) persist through checkpoints, which keeps checkpoint bytes free
    of timing data.
    """

    def __init__(self, budgets: BudgetSpec, log: EventLog, clock=time.monotonic):
        self._state = BudgetState(
            spawns_remaining=budgets.max_spawned_agents,
            rounds_remaining=budgets.max_verification_rounds,
            wall_limit=budgets.wall_clock_limit,
        )
        self._log = log
        self._clock = clock
        self._start = clock()
        self._lock = threading.RLock()
        self._emitted: set[str] = set()
        self.stop_reason: str | None = None

    def elapsed(self) -> float:
        return self._clock() - self._start

    def _note_stop(self, reason: str, node_id: str = "") -> None:
        with self._lock:
            if self.stop_reason is None:
                self.stop_reason = reason
            if reason in self._emitted:
                return
            self._emitted.add(reason)
            snapshot = self._state
        self._log.emit(
            "budget",
            node_id,
            {
                "dimension": reason,
                "spawns_remaining": snapshot.spawns_remaining,
                "rounds_remaining": snapshot.rounds_remaining,
            },
        )

    def _apply(self, event_kind: str, node_id: str) -> bool:
        with self._lock:
            new_state, stop = enforce_budget(self._state, event_kind, self.elapsed())
            if stop is None:
                self._state = new_state
        if stop is not None:
            self._note_stop(stop, node_id)
            return False
        return True

    def try_consume_spawn(self, node_id: str = "") -> bool:
        return self._apply("delegation", node_id)

    def try_consume_round(self, node_id: str = "") -> bool:
        return self._apply("verification-round", node_id)

    def wall_exceeded(self) -> bool:
        with self._lock:
            limit = self._state.wall_limit
            exceeded = limit <= 0 or self.elapsed() > limit
        if exceeded:
            self._note_stop(WALL_CLOCK)
        return exceeded

    def observe_event(self, entry) -> None:
        """Event-log hook: compare the wall clock on every event."""
        if entry.kind != "budget":
            with self._lock:
                limit = self._state.wall_limit
                exceeded = limit <= 0 or self.elapsed() > limit
            if exceeded:
                self._note_stop(WALL_CLOCK, entry.node_id)

    def state(self) -> dict[str, Any]:
        with self._lock:
            return {
                "spawns_remaining": self._state.spawns_remaining,
                "rounds_remaining": self._state.rounds_remaining,
            }

    def restore(self, state: dict[str, Any]) -> None:
        with self._lock:
            self._state = BudgetState(
                spawns_remaining=int(state["spawns_remaining"]),
                rounds_remaining=int(state["rounds_remaining"]),
                wall_limit=self._state.wall_limit,
            )
            self._start = self._clock()


# ---------------------------------------------------------------------------
# Manifest and checkpoint types
# ---------------------------------------------------------------------------


def graph_digest(graph: AgentGraphSpec) -> str:
    return sha256_hex(serialize_graph_spec(graph))


def backends_digest(profiles: dict[str, BackendProfile]) -> str:
    canonical = canonical_json(sorted((pid, profile.to_dict()) for pid, profile in profiles.items()))
    return sha256_hex(canonical)


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    graph_digest: str
    prompt_hashes: dict[str, str]
    backends_digest: str
    seed: int
    started_at: str
    mode: str

    @classmethod
    def create(
        cls,
        run_id: str,
        graph: AgentGraphSpec,
        profiles: dict[str, BackendProfile],
        *,
        seed: int = 0,
        mode: str = "live",
    ) -> "RunManifest":
        if mode not in MODES:
            raise ControllerConfigError(f"unknown mode: {mode!r}")
        if mode == "deterministic":
            live = [pid for pid, profile in profiles.items() if profile.kind != "scripted"]
            if live:
                raise ControllerConfigError(
                    f"deterministic mode requires scripted backends only; live profiles: {live}"
                )
        return cls(
            run_id=run_id,
            graph_digest=graph_digest(graph),
            prompt_hashes=prompt_hashes(),
            backends_digest=backends_digest(profiles),
            seed=seed,
            started_at=datetime.now(timezone.utc).isoformat(),
            mode=mode,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "graph_digest": self.graph_digest,
            "prompt_hashes": self.prompt_hashes,
            "backends_digest": self.backends_digest,
            "seed": self.seed,
            "started_at": self.started_at,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        return cls(
            run_id=str(data["run_id"]),
            graph_digest=str(data["graph_digest"]),
            prompt_hashes=dict(data.get("prompt_hashes", {})),
            backends_digest=str(data["backends_digest"]),
            seed=int(data.get("seed", 0)),
            started_at=str(data.get("started_at", "")),
            mode=str(data.get("mode", "live")),
        )


@dataclass
class Checkpoint:
    """The resumable frontier of a run.

    Only logical state is stored — no timestamps — so re-checkpointing an
    unchanged run produces byte-identical files.
    """

    run_id: str
    log_hwm: int
    task: dict[str, Any]
    entry_state: dict[str, Any] | None
    shared_states: dict[str, dict[str, Any]] = field(default_factory=dict)
    budgets: dict[str, Any] = field(default_factory=dict)
    backend_state: dict[str, Any] = field(default_factory=dict)
    tool_state: dict[str, Any] = field(default_factory=dict)

    @property
    def checkpoint_id(self) -> str:
        return f"ck-{self.log_hwm:08d}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "log_hwm": self.log_hwm,
            "task": self.task,
            "entry_state": self.entry_state,
            "shared_states": self.shared_states,
            "budgets": self.budgets,
            "backend_state": self.backend_state,
            "tool_state": self.tool_state,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Checkpoint":
        return cls(
            run_id=str(data["run_id"]),
            log_hwm=int(data["log_hwm"]),
            task=dict(data["task"]),
            entry_state=data.get("entry_state"),
            shared_states=dict(data.get("shared_states", {})),
            budgets=dict(data.get("budgets", {})),
            backend_state=dict(data.get("backend_state", {})),
            tool_state=dict(data.get("tool_state", {})),
        )


# ---------------------------------------------------------------------------
# Run store
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


class RunStore:
    """Filesystem layout for one run: manifest, event log, checkpoints, result."""

    def __init__(self, root: str | Path, run_id: str, *, create: bool = True):
        self.run_id = run_id
        self.dir = Path(root) / run_id
        self.checkpoints_dir = self.dir / "checkpoints"
        if create:
            try:
                self.checkpoints_dir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StorageError(f"cannot create run directory {self.dir}: {exc}") from exc
        elif not self.dir.is_dir():
            raise StorageError(f"run directory does not exist: {self.dir}")

    @classmethod
    def open_existing(cls, root: str | Path, run_id: str) -> "RunStore":
        return cls(root, run_id, create=False)

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    @property
    def events_path(self) -> Path:
        return self.dir / "events.jsonl"

    @property
    def result_path(self) -> Path:
        return self.dir / "result.json"

    def write_manifest(self, manifest: RunManifest) -> None:
        _atomic_write(self.manifest_path, json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")

    def read_manifest(self) -> RunManifest:
        try:
            return RunManifest.from_dict(json.loads(self.manifest_path.read_text(encoding="utf-8")))
        except OSError as exc:
            raise StorageError(f"cannot read manifest: {exc}") from exc

    def open_log(self) -> EventLog:
        """Start a fresh event log for a new run (truncates any stale file)."""
        try:
            self.events_path.write_text("", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot reset event log: {exc}") from exc
        return EventLog(self.events_path)

    def resume_log(self) -> EventLog:
        return EventLog.load(self.events_path)

    def write_result(self, result: dict[str, Any]) -> None:
        _atomic_write(self.result_path, json.dumps(result, indent=2, sort_keys=True) + "\n")

    def read_result(self) -> dict[str, Any] | None:
        if not self.result_path.exists():
            return None
        return json.loads(self.result_path.read_text(encoding="utf-8"))

    def checkpoint_path(self, checkpoint_id: str) -> Path:
        return self.checkpoints_dir / f"{checkpoint_id}.json"

    def list_checkpoints(self) -> list[str]:
        if not self.checkpoints_dir.is_dir():
            return []
        return sorted(p.stem for p in self.checkpoints_dir.glob("ck-*.json"))

    def read_checkpoint(self, checkpoint_id: str | None = None) -> Checkpoint:
        if checkpoint_id is None:
            available = self.list_checkpoints()
            if not available:
                raise StorageError(f"run {self.run_id!r} has no checkpoints")
            checkpoint_id = available[-1]
        path = self.checkpoint_path(checkpoint_id)
        try:
            return Checkpoint.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except OSError as exc:
            raise StorageError(f"cannot read checkpoint {checkpoint_id}: {exc}") from exc


def checkpoint_write(store: RunStore, checkpoint: Checkpoint) -> Path:
    """Durably (atomically) persist a checkpoint; emits nothing.

    Writing the same logical frontier twice produces byte-identical files
    because checkpoints carry no timing data.
    """
    path = store.checkpoint_path(checkpoint.checkpoint_id)
    _atomic_write(path, json.dumps(checkpoint.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _build_checkpoint(
    run_id: str,
    env: RunEnv,
    task: NormalizedTask,
    entry_state: AgentState | None,
) -> Checkpoint:
    budgets = env.budgets.state() if hasattr(env.budgets, "state") else {}
    backend_state = {
        profile_id: backend.state()
        for profile_id, backend in env.backends.items()
        if callable(getattr(backend, "state", None))
    }
    return Checkpoint(
        run_id=run_id,
        log_hwm=len(env.log),
        task=task.to_dict(),
        entry_state=entry_state.to_dict() if entry_state is not None else None,
        shared_states={node_id: state.to_dict() for node_id, state in env.shared_states.items()},
        budgets=budgets,
        backend_state=backend_state,
        tool_state=env.registry.state_dict(),
    )


def _take_checkpoint(
    store: RunStore | None,
    run_id: str,
    env: RunEnv,
    task: NormalizedTask,
    entry_state: AgentState | None,
) -> None:
    if store is None:
        return
    checkpoint = _build_checkpoint(run_id, env, task, entry_state)
    checkpoint_write(store, checkpoint)
    env.log.emit(
        "checkpoint",
        env.graph.entry,
        {"checkpoint_id": checkpoint.checkpoint_id, "log_hwm": checkpoint.log_hwm},
    )


def _plain_answer(text: str, entry_state: AgentState | None, task: NormalizedTask, status: str) -> StructuredAnswer:
    warnings: list[str] = []
    if status != STATUS_FINISHED:
        warnings.append(f"run stopped early: {status}")
    evidence: tuple[Evidence, ...] = ()
    if entry_state is not None and entry_state.transcript:
        last = entry_state.transcript[-1]
        evidence = (Evidence(claim=text, source=f"turn:{last.turn_index}"),)
    return StructuredAnswer(
        final_answer=text,
        evidence=evidence,
        warnings=tuple(warnings),
        format_tag=task.format_tag,
    )


def _wall_stopped(env: RunEnv) -> bool:
    return isinstance(env.budgets, BudgetTracker) and env.budgets.stop_reason == WALL_CLOCK


def _finalize(
    graph: AgentGraphSpec,
    env: RunEnv,
    store: RunStore | None,
    run_id: str,
    task: NormalizedTask,
    entry_state: AgentState | None,
    text: str,
) -> StructuredAnswer:
    """Output processing, final checkpoint, result persistence."""
    entry = graph.nodes[graph.entry]
    status = entry_state.status if entry_state is not None else STATUS_FINISHED

    if status == STATUS_BUDGET_STOP and _wall_stopped(env):
        partial = _plain_answer(text, entry_state, task, status)
        partial = StructuredAnswer(
            final_answer=partial.final_answer,
            evidence=partial.evidence,
            warnings=partial.warnings + ("wall-clock budget exceeded",),
            format_tag=partial.format_tag,
        )
        _take_checkpoint(store, run_id, env, task, entry_state)
        if store is not None:
            store.write_result({"answer": partial.to_dict(), "status": status})
        raise WallClockExceeded(partial)

    if entry.output_processor and entry_state is not None and entry_state.transcript:
        try:
            answer = synthesize_output(
                entry_state.transcript,
                task,
                env.backend_for(entry),
                retry=env.retry,
                log=env.log,
                node_id=entry.id,
            )
        except EmptyTranscriptError:
            answer = _plain_answer(text, entry_state, task, status)
        if status != STATUS_FINISHED:
            answer = StructuredAnswer(
                final_answer=answer.final_answer,
                evidence=answer.evidence,
                warnings=answer.warnings + (f"run stopped early: {status}",),
                format_tag=answer.format_tag,
            )
    else:
        answer = _plain_answer(text, entry_state, task, status)

    _take_checkpoint(store, run_id, env, task, entry_state)
    if store is not None:
        store.write_result({"answer": answer.to_dict(), "status": status})
    return answer


def _install_checkpoint_hook(
    env: RunEnv,
    store: RunStore | None,
    run_id: str,
    task: NormalizedTask,
    checkpoint_every: int,
) -> None:
    previous = env.on_turn

    def hook(state: AgentState) -> None:
        if state.node.id == env.graph.entry and state.turns_used % max(1, checkpoint_every) == 0:
            _take_checkpoint(store, run_id, env, task, state)
        if previous is not None:
            previous(state)

    env.on_turn = hook


def execute_task(
    graph: AgentGraphSpec,
    query: str,
    env: RunEnv,
    store: RunStore | None = None,
    *,
    run_id: str | None = None,
    seed: int = 0,
    checkpoint_every: int = 1,
) -> StructuredAnswer:
    """Run the full pipeline: normalize, execute the entry node, synthesize.

    Emits the event stream, writes periodic checkpoints (after input
    processing and after every ``checkpoint_every``-th completed entry-node
    turn), and persists the result.  Raises :class:`WallClockExceeded`
    (carrying the partial answer) when the wall-clock budget trips; a
    nonpositive wall budget trips before the first turn.
    """
    if graph.entry not in graph.nodes:
        raise ControllerConfigError(f"graph entry {graph.entry!r} is not a declared node")
    run_id = run_id or f"run-{uuid.uuid4().hex[:12]}"
    mode = "deterministic" if env.deterministic else "live"

    if store is not None:
        manifest = RunManifest.create(run_id, graph, env.backend_profiles, seed=seed, mode=mode)
        store.write_manifest(manifest)
        env.log = store.open_log()
    elif env.deterministic and env.backend_profiles:
        # No store, but still enforce the deterministic-mode precondition.
        RunManifest.create(run_id, graph, env.backend_profiles, seed=seed, mode=mode)

    tracker = BudgetTracker(graph.budgets, env.log)
    env.budgets = tracker
    env.log.on_emit = tracker.observe_event

    entry = graph.nodes[graph.entry]

    if tracker.wall_exceeded():
        partial = StructuredAnswer(
            final_answer="",
            warnings=("wall-clock budget exhausted before execution",),
        )
        if store is not None:
            store.write_result({"answer": partial.to_dict(), "status": STATUS_BUDGET_STOP})
        raise WallClockExceeded(partial)

    if entry.input_processor:
        task = augment_query(query, env.backend_for(entry), retry=env.retry, log=env.log, node_id=entry.id)
    else:
        task = NormalizedTask.identity(query)

    _take_checkpoint(store, run_id, env, task, None)
    _install_checkpoint_hook(env, store, run_id, task, checkpoint_every)

    if env.node_runner is None:
        env.node_runner = run_node_task
    text, entry_state = env.node_runner(entry, task.clarified_goal, env, 0)

    return _finalize(graph, env, store, run_id, task, entry_state, text)


def resume_from_checkpoint(
    store: RunStore,
    graph: AgentGraphSpec,
    env: RunEnv,
    *,
    checkpoint_id: str | None = None,
    checkpoint_every: int = 1,
) -> StructuredAnswer:
    """Continue a run from its last (or a named) checkpoint.

    A finished run returns its recorded answer without emitting any new
    events.  The manifest must match the current graph, prompt resources
    and backend profiles (:class:`ManifestMismatch` otherwise).  With
    deterministic backends, the resumed run reproduces exactly the answer
    the uninterrupted run would have produced.
    """
    recorded = store.read_result()
    if recorded is not None:
        return StructuredAnswer.from_dict(recorded["answer"])

    manifest = store.read_manifest()
    current_graph = graph_digest(graph)
    if manifest.graph_digest != current_graph:
        raise ManifestMismatch("graph_digest", manifest.graph_digest, current_graph)
    current_prompts = prompt_hashes()
    if manifest.prompt_hashes != current_prompts:
        raise ManifestMismatch(
            "prompt_hashes",
            canonical_json(manifest.prompt_hashes),
            canonical_json(current_prompts),
        )
    if env.backend_profiles:
        current_backends = backends_digest(env.backend_profiles)
        if manifest.backends_digest != current_backends:
            raise ManifestMismatch("backends_digest", manifest.backends_digest, current_backends)

    checkpoint = store.read_checkpoint(checkpoint_id)
    env.log = store.resume_log()
    tracker = BudgetTracker(graph.budgets, env.log)
    if checkpoint.budgets:
        tracker.restore(checkpoint.budgets)
    env.budgets = tracker
    env.log.on_emit = tracker.observe_event

    for profile_id, state in checkpoint.backend_state.items():
        backend = env.backends.get(profile_id)
        if backend is not None and callable(getattr(backend, "restore", None)):
            backend.restore(state)
    env.registry.restore_state(checkpoint.tool_state)

    task = NormalizedTask.from_dict(checkpoint.task)
    entry_state = (
        AgentState.from_dict(checkpoint.entry_state, graph) if checkpoint.entry_state is not None else None
    )
    env.shared_states = {
        node_id: AgentState.from_dict(state, graph) for node_id, state in checkpoint.shared_states.items()
    }

    _install_checkpoint_hook(env, store, manifest.run_id, task, checkpoint_every)
    if env.node_runner is None:
        env.node_runner = run_node_task

    if entry_state is None:
        # The run died before (or without) a plain entry state — rerun the
        # entry through the policy dispatcher from the normalized task.
        text, entry_state = env.node_runner(graph.nodes[graph.entry], task.clarified_goal, env, 0)
    elif entry_state.status == STATUS_RUNNING:
        run_agent(entry_state, env)
        text = entry_state.final_text
    else:
        text = entry_state.final_text

    return _finalize(graph, env, store, manifest.run_id, task, entry_state, text)


def replay_run(store: RunStore) -> list[TurnRecord]:
    """Rebuild the transcript purely from the event log.

    Verifies that sequences are dense from zero and that every payload
    matches its recorded digest; raises :class:`LogCorrupt` at the first
    offense.  An empty log yields an empty transcript.  No backend is
    consulted.
    """
    try:
        entries = read_entries(store.events_path)
    except OSError as exc:
        raise StorageError(f"cannot read event log: {exc}") from exc
    except ValueError as exc:  # json decoding
        raise LogCorrupt(position=-1, reason=str(exc)) from exc

    records: list[TurnRecord] = []
    for index, entry in enumerate(entries):
        if entry.sequence != index:
            raise LogCorrupt(position=index, reason=f"expected sequence {index}, found {entry.sequence}")
        expected_digest = sha256_hex(canonical_json(scrub_volatile(entry.payload)))
        if entry.digest != expected_digest:
            raise LogCorrupt(position=index, reason="payload does not match its recorded digest")
        if entry.kind == "turn":
            records.append(TurnRecord.from_dict(entry.payload))
    return records
