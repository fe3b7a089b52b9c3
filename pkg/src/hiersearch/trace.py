"""Session trace: an append-only event log written as JSONL.

Every externally observable step of a session lands here: generation
turns, subtask calls, expert selection, tool calls and results, result
distillation and injection, context elision, and termination.  The eval
harness counts environment interactions from these events, and cmd_replay
renders a run from them without touching any backend or adapter.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

TRACE_KINDS = frozenset({
    "gen_turn", "subtask_call", "selection", "tool_call", "tool_result",
    "distill", "inject", "elide", "terminate",
})


@dataclass(frozen=True)
class TraceEvent:
    ts: float
    session_id: str
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"ts": self.ts, "session_id": self.session_id,
                           "kind": self.kind, "payload": self.payload},
                          ensure_ascii=False)


class Tracer:
    def __init__(self, session_id: str, clock: Callable[[], float] = time.time):
        self.session_id = session_id
        self.events: list[TraceEvent] = []
        self._clock = clock

    def emit(self, kind: str, **payload) -> TraceEvent:
        if kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace kind {kind!r}")
        event = TraceEvent(self._clock(), self.session_id, kind, payload)
        self.events.append(event)
        return event

    def write_jsonl(self, path: str, append: bool = False) -> None:
        mode = "a" if append else "w"
        with open(path, mode, encoding="utf-8") as fh:
            for event in self.events:
                fh.write(event.to_json() + "\n")


def load_trace(path: str) -> list[TraceEvent]:
    events: list[TraceEvent] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad trace line: {exc}") from exc
            events.append(TraceEvent(float(obj.get("ts", 0.0)), obj.get("session_id", ""),
                                     obj["kind"], obj.get("payload", {})))
    return events
