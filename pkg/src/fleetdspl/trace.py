"""Append-only event trace, its line format, and replay checks."""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from typing import IO, Any

EVENT_KINDS = (
    "Reading",
    "Fact",
    "ModeSwitch",
    "Analyze",
    "Plan",
    "NoChange",
    "Command",
    "Ack",
    "Adapt",
    "Warning",
)


class TraceFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class TraceEvent:
    t: int
    kind: str
    payload: dict[str, Any]

    def to_line(self) -> str:
        body = json.dumps(self.payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return f'{{"t":{self.t},"kind":{json.dumps(self.kind)},"payload":{body}}}'


class Trace:
    """Recorder shared by the knowledge base, the adaptation loop and the simulator."""

    def __init__(self, sink: IO[str] | None = None):
        self.events: list[TraceEvent] = []
        self.sink = sink

    def emit(self, t: int, kind: str, payload: dict[str, Any] | None = None) -> TraceEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        event = TraceEvent(int(t), kind, payload or {})
        self.events.append(event)
        if self.sink is not None:
            self.sink.write(event.to_line() + "\n")
        return event

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]


def dumps(events: Iterable[TraceEvent]) -> str:
    return "".join(e.to_line() + "\n" for e in events)


def parse_line(line: str, line_no: int = 1) -> TraceEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(line_no, f"malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict) or list(obj) != ["t", "kind", "payload"]:
        raise TraceFormatError(line_no, 'expected object with keys "t", "kind", "payload" in that order')
    if not isinstance(obj["t"], int) or isinstance(obj["t"], bool):
        raise TraceFormatError(line_no, "t must be an integer")
    if obj["kind"] not in EVENT_KINDS:
        raise TraceFormatError(line_no, f"unknown kind {obj['kind']!r}")
    if not isinstance(obj["payload"], dict):
        raise TraceFormatError(line_no, "payload must be an object")
    return TraceEvent(obj["t"], obj["kind"], obj["payload"])


def loads(text: str) -> list[TraceEvent]:
    return [parse_line(line, i) for i, line in enumerate(text.splitlines(), start=1)]


def read_trace(path) -> list[TraceEvent]:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


@dataclass(frozen=True)
class RuleViolation:
    rule: str
    index: int
    event: TraceEvent
    detail: str

    def __str__(self) -> str:
        return f"{self.rule}: event #{self.index} (t={self.event.t}, {self.event.kind}) {self.detail}"


def check_trace(events: Iterable[TraceEvent]) -> RuleViolation | None:
    """Return the first ordering/causality violation, or None.

    Rules: monotone ticks; every Ack answers an earlier Command to the same
    device; every Adapt follows a successful Plan in the same loop step; the
    Analyze opening that step reported at least one violation.
    """
    last_t = None
    commands: dict[Any, TraceEvent] = {}
    step_analyze: TraceEvent | None = None
    step_planned = False
    for i, ev in enumerate(events):
        if last_t is not None and ev.t < last_t:
            return RuleViolation("monotone-ticks", i, ev, f"tick {ev.t} after {last_t}")
        last_t = ev.t

        if ev.kind == "Analyze":
            step_analyze, step_planned = ev, False
        elif ev.kind == "Plan":
            same_step = step_analyze is not None and step_analyze.t == ev.t
            step_planned = same_step and ev.payload.get("status") == "planned"
        elif ev.kind == "Command":
            commands[ev.payload.get("id")] = ev
        elif ev.kind == "Ack":
            cmd = commands.get(ev.payload.get("id"))
            if cmd is None or cmd.payload.get("device") != ev.payload.get("device"):
                return RuleViolation("ack-after-command", i, ev, "acknowledges no prior command")
        elif ev.kind == "Adapt":
            if not step_planned or step_analyze is None or step_analyze.t != ev.t:
                return RuleViolation("adapt-after-plan", i, ev, "has no preceding Plan in its loop step")
            if not step_analyze.payload.get("violations"):
                return RuleViolation("necessity", i, ev, "follows an Analyze with no violations")
            step_planned = False
    return None
