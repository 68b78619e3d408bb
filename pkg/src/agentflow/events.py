"""Append-only run event log with deterministic, timestamp-stripped digests.

Every observable runtime action (turns, retries, tool attempts, fallbacks,
delegations, ensemble members, verification rounds, checkpoints, budget
exhaustion) is recorded as one immutable entry.  Sequence numbers are
assigned under a single lock, so entries are strictly increasing even when
emitters run concurrently.
"""
from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

EVENT_KINDS = frozenset(
    {
        "turn",
        "tool-attempt",
        "retry",
        "fallback",
        "fault",
        "delegation",
        "ensemble-member",
        "verification-round",
        "checkpoint",
        "budget",
    }
)

# Keys whose values depend on wall-clock time.  They are removed before
# digesting so that two runs doing identical work hash identically.
_VOLATILE_KEYS = frozenset({"timestamp", "ts", "wall_time", "duration", "started_at"})


def canonical_json(obj: Any) -> str:
    """Serialize *obj* to a stable JSON form (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def scrub_volatile(obj: Any) -> Any:
    """Return a copy of *obj* with volatile (time-derived) keys removed."""
    if isinstance(obj, dict):
        return {k: scrub_volatile(v) for k, v in obj.items() if k not in _VOLATILE_KEYS}
    if isinstance(obj, (list, tuple)):
        return [scrub_volatile(v) for v in obj]
    return obj


@dataclass(frozen=True)
class EventLogEntry:
    """One logged event.

    ``digest`` hashes the volatile-stripped payload, so it is stable across
    runs that perform identical work at different speeds.
    """

    sequence: int
    timestamp: float
    kind: str
    node_id: str
    digest: str
    payload: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sequence": self.sequence,
            "timestamp": self.timestamp,
            "kind": self.kind,
            "node_id": self.node_id,
            "digest": self.digest,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EventLogEntry":
        return cls(
            sequence=int(data["sequence"]),
            timestamp=float(data["timestamp"]),
            kind=str(data["kind"]),
            node_id=str(data.get("node_id", "")),
            digest=str(data.get("digest", "")),
            payload=dict(data.get("payload", {})),
        )


class EventLog:
    """Single-writer event sink, optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self._lock = threading.Lock()
        self._entries: list[EventLogEntry] = []
        self._path = Path(path) if path is not None else None
        self.on_emit: Callable[[EventLogEntry], None] | None = None
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._path.touch(exist_ok=True)

    @classmethod
    def load(cls, path: str | Path) -> "EventLog":
        """Open an existing JSONL log and continue its sequence numbering."""
        log = cls(path)
        log._entries = read_entries(path)
        return log

    def emit(self, kind: str, node_id: str = "", payload: dict[str, Any] | None = None) -> EventLogEntry:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind: {kind!r}")
        payload = payload or {}
        digest = sha256_hex(canonical_json(scrub_volatile(payload)))
        with self._lock:
            entry = EventLogEntry(
                sequence=len(self._entries),
                timestamp=time.time(),
                kind=kind,
                node_id=node_id,
                digest=digest,
                payload=payload,
            )
            self._entries.append(entry)
            if self._path is not None:
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
        hook = self.on_emit
        if hook is not None:
            hook(entry)
        return entry

    def entries(self) -> list[EventLogEntry]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for entry in self.entries():
            counts[entry.kind] = counts.get(entry.kind, 0) + 1
        return counts

    def digest(self) -> str:
        """Hash of the whole log with timestamps and durations stripped."""
        stripped = [
            scrub_volatile(
                {
                    "sequence": e.sequence,
                    "kind": e.kind,
                    "node_id": e.node_id,
                    "digest": e.digest,
                    "payload": e.payload,
                }
            )
            for e in self.entries()
        ]
        return sha256_hex(canonical_json(stripped))


def read_entries(path: str | Path) -> list[EventLogEntry]:
    """Read all entries from a JSONL log file (no integrity checks here)."""
    entries: list[EventLogEntry] = []
    text = Path(path).read_text(encoding="utf-8")
    for line in text.splitlines():
        line = line.strip()
        if line:
            entries.append(EventLogEntry.from_dict(json.loads(line)))
    return entries
