"""Workflow specifications: a small task-graph language with AND/XOR
split and join, one owning node per task, and optional work item timers.

Spec documents are JSON::

    {"specId": "order", "version": 1,
     "tasks": [{"taskId": "A", "assignedNode": 0, "splitType": "AND",
                "joinType": "AND", "kind": "user",
                "timer": {"trigger": "onEnablement", "durationMs": 100}}],
     "edges": [{"from": "A", "to": "B"}],
     "start": ["A"], "end": ["C"]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .encoding import canonical

NodeId = int

SPLIT_JOIN_TYPES = ("AND", "XOR")
TASK_KINDS = ("user", "automatic")
TIMER_TRIGGERS = ("onEnablement", "onStart")


class SpecError(ValueError):
    """Raised when a spec document cannot be turned into a valid spec."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class TimerDef:
    trigger: str
    duration: int  # milliseconds


@dataclass(frozen=True)
class TaskDef:
    taskId: str
    assignedNode: NodeId | None
    splitType: str = "AND"
    joinType: str = "AND"
    timer: TimerDef | None = None
    kind: str = "user"


@dataclass(frozen=True)
class WorkflowSpec:
    specId: str
    version: int
    tasks: tuple[TaskDef, ...]
    edges: tuple[tuple[str, str], ...]
    startTaskIds: tuple[str, ...]
    endTaskIds: tuple[str, ...]
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    @property
    def key(self) -> tuple[str, int]:
        return (self.specId, self.version)

    def task(self, task_id: str) -> TaskDef:
        if self._index is None:
            object.__setattr__(self, "_index", {t.taskId: t for t in self.tasks})
        return self._index[task_id]

    def successors(self, task_id: str) -> list[str]:
        return [b for a, b in self.edges if a == task_id]

    def predecessors(self, task_id: str) -> list[str]:
        return [a for a, b in self.edges if b == task_id]


def _reachable(edges, sources) -> set[str]:
    adj: dict[str, list[str]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
    seen = set(sources)
    stack = list(sources)
    while stack:
        for nxt in adj.get(stack.pop(), ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def validate_spec(spec: WorkflowSpec) -> list[str]:
    """Return every violated invariant as ``"<invariant>[:<element>]"``."""
    violations = []
    ids = [t.taskId for t in spec.tasks]
    seen = set()
    for tid in ids:
        if tid in seen:
            violations.append(f"duplicate-task-id:{tid}")
        seen.add(tid)
    if not isinstance(spec.version, int) or spec.version < 1:
        violations.append(f"bad-version:{spec.version}")
    for t in spec.tasks:
        if t.assignedNode is None:
            violations.append(f"missing-assigned-node:{t.taskId}")
        elif not isinstance(t.assignedNode, int) or isinstance(t.assignedNode, bool) or t.assignedNode < 0:
            violations.append(f"bad-assigned-node:{t.taskId}")
        if t.splitType not in SPLIT_JOIN_TYPES:
            violations.append(f"bad-split-type:{t.taskId}")
        if t.joinType not in SPLIT_JOIN_TYPES:
            violations.append(f"bad-join-type:{t.taskId}")
        if t.kind not in TASK_KINDS:
            violations.append(f"bad-kind:{t.taskId}")
        if t.timer is not None and (t.timer.trigger not in TIMER_TRIGGERS or t.timer.duration <= 0):
            violations.append(f"bad-timer:{t.taskId}")
    for a, b in spec.edges:
        for end in (a, b):
            if end not in seen:
                violations.append(f"unknown-task:{end}")
    if not spec.startTaskIds:
        violations.append("no-start")
    if not spec.endTaskIds:
        violations.append("no-end")
    for tid in list(spec.startTaskIds) + list(spec.endTaskIds):
        if tid not in seen:
            violations.append(f"unknown-task:{tid}")
    if spec.startTaskIds and spec.endTaskIds:
        reach = _reachable(spec.edges, [s for s in spec.startTaskIds if s in seen])
        if not any(e in reach for e in spec.endTaskIds):
            violations.append("unreachable-end")
    return violations


def _parse_task(raw) -> TaskDef:
    if not isinstance(raw, dict) or not isinstance(raw.get("taskId"), str):
        raise SpecError("malformed", "task entries need a string taskId")
    if "assignedNode" not in raw or raw["assignedNode"] is None:
        raise SpecError("missing-assignment", raw["taskId"])
    timer = None
    if raw.get("timer") is not None:
        t = raw["timer"]
        try:
            timer = TimerDef(trigger=t["trigger"], duration=int(t["durationMs"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError("malformed", f"timer of {raw['taskId']}") from exc
    return TaskDef(
        taskId=raw["taskId"],
        assignedNode=raw["assignedNode"],
        splitType=raw.get("splitType", "AND"),
        joinType=raw.get("joinType", "AND"),
        timer=timer,
        kind=raw.get("kind", "user"),
    )


def parse_spec(document) -> WorkflowSpec:
    """Parse and validate a spec document (JSON text, bytes or dict)."""
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SpecError("malformed", str(exc)) from exc
    if not isinstance(document, dict):
        raise SpecError("malformed", "top level must be an object")
    try:
        tasks = tuple(_parse_task(t) for t in document["tasks"])
        edges = tuple((e["from"], e["to"]) for e in document.get("edges", []))
        spec = WorkflowSpec(
            specId=str(document["specId"]),
            version=document.get("version", 1),
            tasks=tasks,
            edges=edges,
            startTaskIds=tuple(document["start"]),
            endTaskIds=tuple(document["end"]),
        )
    except (KeyError, TypeError) as exc:
        raise SpecError("malformed", f"missing or bad field {exc}") from exc
    violations = validate_spec(spec)
    if violations:
        first = violations[0]
        code = first.split(":", 1)[0]
        if code == "unreachable-end":
            code = "disconnected-graph"
        elif code == "missing-assigned-node":
            code = "missing-assignment"
        raise SpecError(code, "; ".join(violations))
    return spec


def serialize_spec(spec: WorkflowSpec) -> dict:
    tasks = []
    for t in spec.tasks:
        entry = {
            "taskId": t.taskId,
            "assignedNode": t.assignedNode,
            "splitType": t.splitType,
            "joinType": t.joinType,
            "kind": t.kind,
        }
        if t.timer is not None:
            entry["timer"] = {"trigger": t.timer.trigger, "durationMs": t.timer.duration}
        tasks.append(entry)
    return {
        "specId": spec.specId,
        "version": spec.version,
        "tasks": tasks,
        "edges": [{"from": a, "to": b} for a, b in spec.edges],
        "start": list(spec.startTaskIds),
        "end": list(spec.endTaskIds),
    }


def spec_bytes(spec: WorkflowSpec) -> bytes:
    return canonical(serialize_spec(spec))
