"""Deterministic workflow engine.

The engine only ever sees operations in consensus order, so everything it
derives (case ids, work item ids, markings) is identical on every honest
node.  Local wall-clock timestamps are kept on work items for local
consumers but never enter digests or consensus payloads.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .encoding import ZERO_DIGEST, canonical, digest, from_canonical
from .model import SpecError, WorkflowSpec, parse_spec, serialize_spec

OP_TYPES = (
    "LoadSpecification",
    "UnloadSpecification",
    "LaunchCase",
    "CancelCase",
    "StartWorkItem",
    "CompleteWorkItem",
    "SuspendWorkItem",
    "UnsuspendWorkItem",
    "RollbackWorkItem",
    "SkipWorkItem",
    "CancelWorkItem",
    "TimerExpiry",
    "DelayedLaunchFire",
)

WORK_ITEM_OPS = frozenset(
    {
        "StartWorkItem",
        "CompleteWorkItem",
        "SuspendWorkItem",
        "UnsuspendWorkItem",
        "RollbackWorkItem",
        "SkipWorkItem",
        "CancelWorkItem",
        "TimerExpiry",
    }
)

ENABLED, STARTED, SUSPENDED = "Enabled", "Started", "Suspended"
COMPLETED, CANCELLED, SKIPPED = "Completed", "Cancelled", "Skipped"
ACTIVE_STATES = frozenset({ENABLED, STARTED, SUSPENDED})

# Legal work item transitions; terminal states have none.
TRANSITIONS = {
    ENABLED: frozenset({STARTED, CANCELLED, SKIPPED}),
    STARTED: frozenset({COMPLETED, SUSPENDED, CANCELLED, SKIPPED, ENABLED}),
    SUSPENDED: frozenset({STARTED, CANCELLED}),
    COMPLETED: frozenset(),
    CANCELLED: frozenset(),
    SKIPPED: frozenset(),
}

TIME_FIELDS = ("enablementTime", "startTime", "completionTime")

CASE_ANNOUNCEMENTS = (
    "CaseStart",
    "CaseCompletion",
    "CaseCancellation",
    "CaseDeadlock",
    "CaseSuspension",
    "CaseResumption",
)
ITEM_ANNOUNCEMENTS = ("WorkItemFiring", "WorkItemStatusChange", "WorkItemCancellation", "TimerExpiry")


@dataclass(frozen=True)
class WorkflowOperation:
    opType: str
    payload: dict
    originNode: int
    clientRequestId: str

    def to_dict(self) -> dict:
        return {
            "opType": self.opType,
            "payload": self.payload,
            "originNode": self.originNode,
            "clientRequestId": self.clientRequestId,
        }

    def to_bytes(self) -> bytes:
        return canonical(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowOperation":
        if d.get("opType") not in OP_TYPES:
            raise ValueError(f"unknown opType {d.get('opType')!r}")
        return cls(d["opType"], dict(d.get("payload") or {}), int(d["originNode"]), str(d["clientRequestId"]))

    @classmethod
    def from_bytes(cls, data: bytes) -> "WorkflowOperation":
        return cls.from_dict(from_canonical(data))

    @property
    def target_item(self) -> str | None:
        if self.opType in WORK_ITEM_OPS:
            return self.payload.get("workItemId")
        return None


@dataclass
class WorkItem:
    id: str
    taskId: str
    caseId: str
    state: str
    assignedNode: int
    consumed: list = field(default_factory=list)
    times: dict = field(default_factory=dict)

    def describe(self, with_times: bool = False) -> dict:
        d = {
            "id": self.id,
            "taskId": self.taskId,
            "caseId": self.caseId,
            "state": self.state,
            "assignedNode": self.assignedNode,
        }
        if with_times:
            d.update(self.times)
        return d


@dataclass
class Case:
    id: str
    specId: str
    version: int
    marking: dict = field(default_factory=dict)
    status: str = "Running"
    caseData: dict = field(default_factory=dict)
    reachedEnd: bool = False
    counters: dict = field(default_factory=dict)

    def describe(self) -> dict:
        return {
            "caseId": self.id,
            "specId": self.specId,
            "version": self.version,
            "status": self.status,
            "caseData": dict(self.caseData),
        }

    def full(self) -> dict:
        d = self.describe()
        d["marking"] = {k: v for k, v in self.marking.items() if v}
        d["reachedEnd"] = self.reachedEnd
        d["counters"] = dict(self.counters)
        return d


@dataclass(frozen=True)
class Announcement:
    kind: str
    subject: str
    scope: int | None  # None means Global, otherwise the node the event is local to

    @property
    def is_global(self) -> bool:
        return self.scope is None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "subject": self.subject, "scope": "Global" if self.scope is None else self.scope}


def announcement_scope(kind: str, assigned_node: int | None = None) -> int | None:
    if kind in CASE_ANNOUNCEMENTS:
        return None
    if kind in ITEM_ANNOUNCEMENTS:
        return assigned_node
    raise ValueError(kind)


@dataclass
class OperationResult:
    ok: bool
    error: str | None = None
    entity: object = None
    local_entity: object = None  # same as entity but with local timestamps

    def consensus(self) -> dict:
        """Consensus-comparable form: identical on every honest node."""
        return {"ok": self.ok, "error": self.error, "entity": self.entity}

    def local(self) -> dict:
        return {"ok": self.ok, "error": self.error, "entity": self.local_entity if self.local_entity is not None else self.entity}


class EngineError(Exception):
    def __init__(self, code: str):
        super().__init__(code)
        self.code = code


@dataclass(frozen=True)
class TimerEvent:
    workItemId: str
    action: str  # "cancel" or "skip"
    due: float


def _item_key(wid: str):
    case, rest = wid.split(".", 1)
    task, n = rest.rsplit(".", 1)
    return (_case_key(case), task, int(n))


def _case_key(cid: str):
    return (len(cid), cid)


class EngineState:
    """Replicated state of work: loaded specs, cases and work items."""

    def __init__(self):
        self.specs: dict[tuple[str, int], WorkflowSpec] = {}
        self.cases: dict[str, Case] = {}
        self.items: dict[str, WorkItem] = {}
        self.lastBlockHash: bytes = ZERO_DIGEST
        self.appliedCount = 0
        self._by_case: dict[str, list[str]] = {}

    # -- bookkeeping -------------------------------------------------------

    def copy(self) -> "EngineState":
        return copy.deepcopy(self)

    def canonical_state(self) -> dict:
        return {
            "specs": [serialize_spec(self.specs[k]) for k in sorted(self.specs)],
            "cases": [self.cases[k].full() for k in sorted(self.cases, key=_case_key)],
            "items": [
                dict(self.items[k].describe(), consumed=list(self.items[k].consumed))
                for k in sorted(self.items, key=_item_key)
            ],
        }

    def digest(self) -> bytes:
        return digest(canonical(self.canonical_state()))

    def to_snapshot(self) -> dict:
        snap = self.canonical_state()
        snap["times"] = {k: it.times for k, it in self.items.items() if it.times}
        snap["lastBlockHash"] = self.lastBlockHash.hex()
        snap["appliedCount"] = self.appliedCount
        return snap

    @classmethod
    def from_snapshot(cls, snap: dict) -> "EngineState":
        st = cls()
        for doc in snap["specs"]:
            spec = parse_spec(doc)
            st.specs[spec.key] = spec
        for c in snap["cases"]:
            st.cases[c["caseId"]] = Case(
                id=c["caseId"],
                specId=c["specId"],
                version=c["version"],
                marking=dict(c["marking"]),
                status=c["status"],
                caseData=dict(c["caseData"]),
                reachedEnd=c["reachedEnd"],
                counters=dict(c["counters"]),
            )
        times = snap.get("times", {})
        for it in snap["items"]:
            st._add_item(WorkItem(
                id=it["id"],
                taskId=it["taskId"],
                caseId=it["caseId"],
                state=it["state"],
                assignedNode=it["assignedNode"],
                consumed=list(it["consumed"]),
                times=dict(times.get(it["id"], {})),
            ))
        st.lastBlockHash = bytes.fromhex(snap["lastBlockHash"])
        st.appliedCount = snap["appliedCount"]
        return st

    # -- apply ---------------------------------------------------------------

    def apply(self, op: WorkflowOperation, block_hash: bytes, now: float | None = None):
        """Apply one ordered operation in place.

        Returns ``(OperationResult, announcements)``.  Rejected operations
        leave the workflow state untouched; the block hash and applied count
        always advance because the operation is on the chain either way.
        """
        self.lastBlockHash = block_hash
        self.appliedCount += 1
        anns: list[Announcement] = []
        try:
            entity = self._dispatch(op, anns, now)
        except EngineError as exc:
            return OperationResult(False, exc.code), []
        local = entity
        if isinstance(entity, dict) and entity.get("id") in self.items:
            local = self.items[entity["id"]].describe(with_times=True)
        return OperationResult(True, None, entity, local), anns

    def _dispatch(self, op: WorkflowOperation, anns, now):
        p = op.payload
        t = op.opType
        if t == "LoadSpecification":
            try:
                spec = parse_spec(p.get("spec"))
            except SpecError as exc:
                raise EngineError("invalid-spec") from exc
            if spec.key in self.specs:
                raise EngineError("spec-already-loaded")
            self.specs[spec.key] = spec
            return {"specId": spec.specId, "version": spec.version}
        if t == "UnloadSpecification":
            key = (str(p.get("specId")), p.get("version", 1))
            if key not in self.specs:
                raise EngineError("spec-not-loaded")
            if any(c.status == "Running" and (c.specId, c.version) == key for c in self.cases.values()):
                raise EngineError("spec-in-use")
            del self.specs[key]
            return {"specId": key[0], "version": key[1]}
        if t in ("LaunchCase", "DelayedLaunchFire"):
            return self._launch(p, anns, now)
        if t == "CancelCase":
            case = self.cases.get(str(p.get("caseId")))
            if case is None:
                raise EngineError("unknown-id")
            if case.status not in ("Running", "Deadlocked"):
                raise EngineError("illegal-transition")
            for it in self._case_items(case.id):
                if it.state in ACTIVE_STATES:
                    it.state = CANCELLED
                    anns.append(Announcement("WorkItemCancellation", it.id, it.assignedNode))
            case.marking = {}
            case.status = "Cancelled"
            anns.append(Announcement("CaseCancellation", case.id, None))
            return case.describe()
        if t in WORK_ITEM_OPS:
            return self._item_op(op, anns, now)
        raise EngineError("unknown-operation")

    def _launch(self, p, anns, now):
        key = (str(p.get("specId")), p.get("version", 1))
        spec = self.specs.get(key)
        if spec is None:
            raise EngineError("spec-not-loaded")
        data = p.get("caseData") or {}
        if not isinstance(data, dict):
            raise EngineError("bad-case-data")
        cid = str(self.appliedCount)
        case = Case(id=cid, specId=spec.specId, version=spec.version, caseData={str(k): str(v) for k, v in data.items()})
        for s in spec.startTaskIds:
            _add(case.marking, "in:" + s)
        self.cases[cid] = case
        anns.append(Announcement("CaseStart", cid, None))
        self._reconcile(case, spec, anns, now)
        return case.describe()

    def _item_op(self, op: WorkflowOperation, anns, now):
        p = op.payload
        item = self.items.get(str(p.get("workItemId")))
        if item is None:
            raise EngineError("unknown-id")
        if item.assignedNode != op.originNode:
            raise EngineError("visibility-violation")
        case = self.cases[item.caseId]
        if case.status != "Running":
            raise EngineError("illegal-transition")
        spec = self.specs.get((case.specId, case.version))
        if spec is None:
            raise EngineError("spec-not-loaded")
        t = op.opType
        if t == "TimerExpiry":
            action = p.get("action")
            if action == "cancel" and item.state == ENABLED:
                t = "CancelWorkItem"
            elif action == "skip" and item.state == STARTED:
                t = "SkipWorkItem"
            else:
                raise EngineError("illegal-transition")
            anns.append(Announcement("TimerExpiry", item.id, item.assignedNode))
        target = {
            "StartWorkItem": STARTED,
            "CompleteWorkItem": COMPLETED,
            "SuspendWorkItem": SUSPENDED,
            "UnsuspendWorkItem": STARTED,
            "RollbackWorkItem": ENABLED,
            "SkipWorkItem": SKIPPED,
            "CancelWorkItem": CANCELLED,
        }[t]
        # Unsuspend is only legal from Suspended, start only from Enabled.
        if t == "UnsuspendWorkItem" and item.state != SUSPENDED:
            raise EngineError("illegal-transition")
        if t == "StartWorkItem" and item.state != ENABLED:
            raise EngineError("illegal-transition")
        if t == "RollbackWorkItem" and item.state != STARTED:
            raise EngineError("illegal-transition")
        if target not in TRANSITIONS[item.state]:
            raise EngineError("illegal-transition")
        data = p.get("data") or {}
        if t == "CompleteWorkItem" and not isinstance(data, dict):
            raise EngineError("bad-case-data")

        prev = item.state
        task = spec.task(item.taskId)
        if prev == ENABLED and target in (STARTED, SKIPPED, CANCELLED):
            item.consumed = self._consume(case, spec, item.taskId)
        if target == ENABLED:
            for place in item.consumed:
                _add(case.marking, place)
            item.consumed = []
        item.state = target
        if now is not None:
            if target == STARTED and prev == ENABLED:
                item.times["startTime"] = now
            elif target in (COMPLETED, SKIPPED, CANCELLED):
                item.times["completionTime"] = now
        if target == CANCELLED:
            anns.append(Announcement("WorkItemCancellation", item.id, item.assignedNode))
        else:
            anns.append(Announcement("WorkItemStatusChange", item.id, item.assignedNode))
        if t == "CompleteWorkItem":
            for k, v in data.items():
                case.caseData[str(k)] = str(v)
        if target in (COMPLETED, SKIPPED):
            self._produce(case, spec, task)
        self._reconcile(case, spec, anns, now)
        return item.describe()

    # -- token game ----------------------------------------------------------

    def _case_items(self, cid: str):
        return [self.items[k] for k in sorted(self._by_case.get(cid, ()), key=_item_key)]

    def _add_item(self, it: WorkItem) -> None:
        self.items[it.id] = it
        self._by_case.setdefault(it.caseId, []).append(it.id)

    def _consume(self, case: Case, spec: WorkflowSpec, task_id: str) -> list[str]:
        task = spec.task(task_id)
        start = "in:" + task_id
        if case.marking.get(start, 0) > 0:
            places = [start]
        else:
            sources = input_places(spec, task_id)
            if task.joinType == "AND":
                places = sources
            else:
                places = [next(s for s in sources if case.marking.get(s, 0) > 0)]
        for place in places:
            case.marking[place] -= 1
            if not case.marking[place]:
                del case.marking[place]
        return places

    def _produce(self, case: Case, spec: WorkflowSpec, task) -> None:
        for place in output_places(spec, task.taskId):
            _add(case.marking, place)
        if task.taskId in spec.endTaskIds:
            case.reachedEnd = True

    def _reconcile(self, case: Case, spec: WorkflowSpec, anns, now) -> None:
        items = self._case_items(case.id)
        for task in spec.tasks:
            enabled = [it for it in items if it.taskId == task.taskId and it.state == ENABLED]
            sat = is_enabled(spec, task.taskId, case.marking)
            if enabled and not sat:
                for it in enabled:
                    it.state = CANCELLED
                    if now is not None:
                        it.times["completionTime"] = now
                    anns.append(Announcement("WorkItemCancellation", it.id, it.assignedNode))
            elif sat and not enabled:
                n = case.counters.get(task.taskId, 0) + 1
                case.counters[task.taskId] = n
                wid = f"{case.id}.{task.taskId}.{n}"
                it = WorkItem(id=wid, taskId=task.taskId, caseId=case.id, state=ENABLED, assignedNode=task.assignedNode)
                if now is not None:
                    it.times["enablementTime"] = now
                self._add_item(it)
                items.append(it)
                anns.append(Announcement("WorkItemFiring", wid, it.assignedNode))
        if not any(it.state in ACTIVE_STATES for it in items):
            if case.reachedEnd:
                case.status = "Completed"
                anns.append(Announcement("CaseCompletion", case.id, None))
            else:
                case.status = "Deadlocked"
                anns.append(Announcement("CaseDeadlock", case.id, None))

    # -- reads ----------------------------------------------------------------

    def read(self, query: dict) -> OperationResult:
        q = query.get("query")
        if q == "list-specifications":
            return OperationResult(True, None, [{"specId": k[0], "version": k[1]} for k in sorted(self.specs)])
        if q == "list-cases":
            keys = sorted(self.cases, key=_case_key)
            if "status" in query:
                keys = [k for k in keys if self.cases[k].status == query["status"]]
            return OperationResult(True, None, [self.cases[k].describe() for k in keys])
        if q in ("case-state", "case-data"):
            case = self.cases.get(str(query.get("caseId")))
            if case is None:
                return OperationResult(False, "unknown-id")
            if q == "case-state":
                return OperationResult(True, None, {"caseId": case.id, "status": case.status})
            return OperationResult(True, None, dict(case.caseData))
        if q == "list-work-items":
            out = []
            for k in sorted(self.items, key=_item_key):
                it = self.items[k]
                if "node" in query and it.assignedNode != query["node"]:
                    continue
                if "state" in query and it.state != query["state"]:
                    continue
                if "caseId" in query and it.caseId != str(query["caseId"]):
                    continue
                out.append(it)
            return OperationResult(True, None, [it.describe() for it in out], [it.describe(True) for it in out])
        if q == "get-work-item":
            it = self.items.get(str(query.get("workItemId")))
            if it is None:
                return OperationResult(False, "unknown-id")
            return OperationResult(True, None, it.describe(), it.describe(with_times=True))
        return OperationResult(False, "unknown-query")

    def timers_due(self, node_id: int, now: float) -> list[TimerEvent]:
        return [ev for ev in self.pending_timers(node_id) if ev.due <= now]

    def pending_timers(self, node_id: int) -> list[TimerEvent]:
        out = []
        for k in sorted(self.items, key=_item_key):
            it = self.items[k]
            if it.assignedNode != node_id or it.state not in (ENABLED, STARTED):
                continue
            case = self.cases[it.caseId]
            if case.status != "Running":
                continue
            spec = self.specs.get((case.specId, case.version))
            timer = spec.task(it.taskId).timer if spec else None
            if timer is None:
                continue
            if timer.trigger == "onEnablement" and it.state == ENABLED and "enablementTime" in it.times:
                out.append(TimerEvent(it.id, "cancel", it.times["enablementTime"] + timer.duration))
            elif timer.trigger == "onStart" and it.state == STARTED and "startTime" in it.times:
                out.append(TimerEvent(it.id, "skip", it.times["startTime"] + timer.duration))
        return out


def _add(marking: dict, place: str) -> None:
    marking[place] = marking.get(place, 0) + 1


def edge_place(spec: WorkflowSpec, src: str, dst: str) -> str:
    # An XOR split shares a single output place between all successors so
    # that whichever successor starts first consumes the token.
    if spec.task(src).splitType == "XOR":
        return "out:" + src
    return f"{src}->{dst}"


def input_places(spec: WorkflowSpec, task_id: str) -> list[str]:
    places = []
    for pred in spec.predecessors(task_id):
        pl = edge_place(spec, pred, task_id)
        if pl not in places:
            places.append(pl)
    return places


def output_places(spec: WorkflowSpec, task_id: str) -> list[str]:
    places = []
    for succ in spec.successors(task_id):
        pl = edge_place(spec, task_id, succ)
        if pl not in places:
            places.append(pl)
    return places


def is_enabled(spec: WorkflowSpec, task_id: str, marking: dict) -> bool:
    if marking.get("in:" + task_id, 0) > 0:
        return True
    sources = input_places(spec, task_id)
    if not sources:
        return False
    if spec.task(task_id).joinType == "AND":
        return all(marking.get(s, 0) > 0 for s in sources)
    return any(marking.get(s, 0) > 0 for s in sources)


# -- functional surface ---------------------------------------------------------


def apply_operation(state: EngineState, op: WorkflowOperation, block_hash: bytes, now: float | None = None):
    """Pure variant of :meth:`EngineState.apply`: returns a new state."""
    new = state.copy()
    result, anns = new.apply(op, block_hash, now)
    return new, result, anns


def fire_token_game(state: EngineState, case_id: str, completed_task: str):
    """Produce the completed task's output tokens and re-derive enablement.

    Operates on a copy; returns ``(marking, newly enabled item ids, status)``.
    """
    st = state.copy()
    case = st.cases[case_id]
    spec = st.specs[(case.specId, case.version)]
    before = set(st.items)
    st._produce(case, spec, spec.task(completed_task))
    st._reconcile(case, spec, [], None)
    new_items = sorted((k for k in st.items if k not in before and st.items[k].state == ENABLED), key=_item_key)
    return dict(case.marking), new_items, case.status


def read_query(state: EngineState, query: dict) -> OperationResult:
    return state.read(query)


def schedule_timers(state: EngineState, node_id: int, local_clock: float) -> list[TimerEvent]:
    return state.timers_due(node_id, local_clock)


def state_digest(state: EngineState) -> bytes:
    return state.digest()
