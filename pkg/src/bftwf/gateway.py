"""Engine gateway: the node's front door.

Global writes are turned into workflow operations and ordered; global
reads are served locally or through consensus depending on the configured
read mode; local calls go straight to local components.  Everything is
callback based because the node runs inside a single event loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .engine import WORK_ITEM_OPS, WorkflowOperation

log = logging.getLogger(__name__)

READ_MODES = ("LocalBypass", "UnorderedConsensus", "OrderedConsensus")
FAULT_POLICIES = ("FailEarly", "KeepOperating")

RECHECK_ATTEMPTS = 2
RECHECK_DELAY = 100.0


@dataclass(frozen=True)
class CallClass:
    locality: str  # "Local" | "Global"
    mutation: str  # "Read" | "Write"


LOCAL_READ = CallClass("Local", "Read")
LOCAL_WRITE = CallClass("Local", "Write")
GLOBAL_READ = CallClass("Global", "Read")
GLOBAL_WRITE = CallClass("Global", "Write")

# Intercepted write calls and the operation each one becomes.  ``None`` marks
# calls that are classified but not supported by this engine.
WRITE_CALLS = {
    "loadSpecification": "LoadSpecification",
    "unloadSpecification": "UnloadSpecification",
    "launchCase": "LaunchCase",
    "cancelCase": "CancelCase",
    "suspendWorkItem": "SuspendWorkItem",
    "unsuspendWorkItem": "UnsuspendWorkItem",
    "rollbackWorkItem": "RollbackWorkItem",
    "completeWorkItem": "CompleteWorkItem",
    "startWorkItem": "StartWorkItem",
    "skipWorkItem": "SkipWorkItem",
    "cancelWorkItem": "CancelWorkItem",
    "createNewInstance": None,
    "restartWorkItem": None,
    "rejectAnnouncedEnabledTask": None,
}

# Intercepted read calls mapped onto engine queries.
READ_CALLS = {
    "getSpecificationList": {"query": "list-specifications"},
    "getAllRunningCases": {"query": "list-cases", "status": "Running"},
    "getCaseState": {"query": "case-state"},
    "getCaseData": {"query": "case-data"},
    "describeAllWorkItems": {"query": "list-work-items"},
    "getAvailableWorkItemIDs": {"query": "list-work-items", "state": "Enabled"},
    "getWorkItem": {"query": "get-work-item"},
    "getProcessDefinition": None,
    "getSpecificationDataSchema": None,
    "getStartingDataSnapshot": None,
    "getSpecificationData": None,
    "getLatestSpecVersion": None,
    "getCasesForSpecification": None,
    "getSpecificationIDForCase": None,
    "getSpecificationForCase": None,
    "getCaseInstanceSummary": None,
    "exportCaseState": None,
    "exportAllCaseStates": None,
    "getWorkItemsWithIdentifier": None,
    "getWorkItemsForService": None,
    "getTaskInformation": None,
    "checkEligibilityToAddInstance": None,
    "getChildrenOfWorkItem": None,
    "getWorkItemOptions": None,
    "getMITaskAttributes": None,
    "getResourcingSpecs": None,
    "getWorkItemInstanceSummary": None,
    "getParameterInstanceSummary": None,
}

LOCAL_CALLS = {"getServices": LOCAL_READ, "registerService": LOCAL_WRITE}

_QUERY_ARGS = ("caseId", "workItemId", "node", "state", "status")


def classify(name: str) -> CallClass:
    if name in LOCAL_CALLS:
        return LOCAL_CALLS[name]
    if name in WRITE_CALLS:
        return GLOBAL_WRITE
    if name in READ_CALLS:
        return GLOBAL_READ
    raise KeyError(name)


def call_to_query(call: dict) -> dict | None:
    if "query" in call:
        return dict(call)
    base = READ_CALLS.get(call.get("call"))
    if base is None:
        return None
    q = dict(base)
    for k in _QUERY_ARGS:
        if k in call:
            q[k] = call[k]
    return q


def call_payload(call: dict) -> dict:
    return {k: v for k, v in call.items() if k not in ("call", "delayMs")}


def strip_times(obj):
    from .engine import TIME_FIELDS

    if isinstance(obj, dict):
        return {k: strip_times(v) for k, v in obj.items() if k not in TIME_FIELDS}
    if isinstance(obj, list):
        return [strip_times(v) for v in obj]
    return obj


class Gateway:
    def __init__(self, node, read_mode: str = "LocalBypass", fault_policy: str = "KeepOperating"):
        if read_mode not in READ_MODES:
            raise ValueError(read_mode)
        if fault_policy not in FAULT_POLICIES:
            raise ValueError(fault_policy)
        self.node = node
        self.read_mode = read_mode
        self.fault_policy = fault_policy
        self.services: dict[str, dict] = {}
        self._delay_counter = 0

    @property
    def node_id(self) -> int:
        return self.node.id

    # -- entry point -------------------------------------------------------

    def handle(self, call: dict, callback) -> None:
        """Classify a call and route it.  ``callback(result_dict)``."""
        name = call.get("call")
        if "query" in call and name is None:
            self.handle_read(call_to_query(call), self.read_mode, callback)
            return
        try:
            cls = classify(name)
        except KeyError:
            callback({"ok": False, "error": "unknown-call"})
            return
        if cls.locality == "Local":
            callback(self._local_call(call))
        elif cls.mutation == "Write":
            self.handle_write(call, callback)
        else:
            q = call_to_query(call)
            if q is None:
                callback({"ok": False, "error": "unsupported-call"})
            else:
                self.handle_read(q, call.get("mode", self.read_mode), callback)

    def _local_call(self, call: dict) -> dict:
        if call["call"] == "registerService":
            self.services[str(call.get("name"))] = dict(call.get("service") or {})
            return {"ok": True, "entity": {"name": call.get("name")}}
        return {"ok": True, "entity": sorted(self.services)}

    # -- writes -------------------------------------------------------------

    def build_operation(self, call: dict) -> WorkflowOperation:
        op_type = WRITE_CALLS.get(call.get("call"))
        if op_type is None:
            raise KeyError(call.get("call"))
        return WorkflowOperation(op_type, call_payload(call), self.node_id, self.node.client.next_id())

    def visibility_ok(self, op: WorkflowOperation) -> bool:
        if op.opType not in WORK_ITEM_OPS:
            return True
        item = self.node.engine.items.get(str(op.payload.get("workItemId")))
        return item is None or item.assignedNode == self.node_id

    def handle_write(self, call: dict, callback) -> None:
        try:
            op = self.build_operation(call)
        except KeyError:
            callback({"ok": False, "error": "unsupported-call"})
            return
        if not self.visibility_ok(op):
            callback({"ok": False, "error": "visibility-violation", "ordered": False})
            return
        delay = call.get("delayMs")
        if op.opType == "LaunchCase" and delay:
            self._delayed_launch(op, float(delay), callback)
            return
        self.submit_operation(op, callback)

    def _delayed_launch(self, op: WorkflowOperation, delay: float, callback) -> None:
        self._delay_counter += 1
        delay_id = f"{self.node_id}-delay-{self._delay_counter}"

        def fire():
            fired = WorkflowOperation(
                "DelayedLaunchFire", dict(op.payload, delayId=delay_id), self.node_id, self.node.client.next_id()
            )
            self.submit_operation(fired, self.node.record_async_result)

        self.node.transport.call_later(delay, fire)
        callback({"ok": True, "entity": {"scheduled": delay_id, "delayMs": delay}})

    def submit_operation(self, op: WorkflowOperation, callback) -> None:
        """Order an operation and report the consensus outcome."""

        def done(reply):
            if not reply.ok:
                callback({"ok": False, "error": reply.error, "latency": reply.latency})
                return
            res = reply.result
            inner = res.get("result") or {}
            out = {
                "ok": bool(inner.get("ok")),
                "error": inner.get("error") if not inner.get("ok") else None,
                "entity": inner.get("entity"),
                "lastBlockHash": res.get("lastBlockHash"),
                "height": res.get("height"),
                "latency": reply.latency,
            }
            if res.get("error"):
                out["ok"], out["error"] = False, res["error"]
            if not out["ok"] and inner.get("error"):
                out["consensusError"] = True
            if self.fault_policy == "FailEarly" and res.get("height"):
                self._echo_check(res, out, callback, RECHECK_ATTEMPTS)
            else:
                callback(out)

        self.node.client.submit({"type": "write", "op": op.to_dict()}, "ordered", done, request_id=op.clientRequestId)

    def _echo_check(self, consensus: dict, out: dict, callback, attempts: int) -> None:
        verdict = self.compare_write(consensus)
        if verdict == "pending" and attempts > 1:
            self.node.transport.call_later(
                RECHECK_DELAY, self._echo_check, consensus, out, callback, attempts - 1
            )
            return
        if verdict == "consistent":
            local = self.node.local_results.get(consensus["height"])
            if local is not None and local[1].local_entity is not None and out["ok"]:
                out["entity"] = local[1].local()["entity"]
            out["divergence"] = False
        else:
            out["divergence"] = True
            self.node.note_divergence("write-echo", {"height": consensus.get("height"), "verdict": verdict})
            self.recover_node(lambda ok: None)
        callback(out)

    def compare_write(self, consensus: dict) -> str:
        """Compare the consensus write result with the local copy.

        Returns ``consistent``, ``divergent`` or ``pending`` (local node has
        not applied that block yet).
        """
        height = consensus.get("height")
        local = self.node.local_results.get(height)
        if local is None:
            if self.node.chain.head_seq < height:
                return "pending"
            return "divergent"
        blk_hash, result = local
        if blk_hash.hex() != consensus.get("lastBlockHash") or result.consensus() != consensus.get("result"):
            return "divergent"
        entity = result.entity
        # Nothing applied since: the live entity must still look the same.
        if self.node.chain.head_seq == height and isinstance(entity, dict):
            live = self.node.describe_entity(entity)
            if live is not None and live != entity:
                return "divergent"
        return "consistent"

    # -- reads --------------------------------------------------------------

    def handle_read(self, query: dict, mode: str, callback) -> None:
        if mode == "LocalBypass":
            res = self.node.engine.read(query)
            callback({"ok": res.ok, "error": res.error, "entity": res.local()["entity"], "mode": mode})
            return
        ordering_mode = "unordered" if mode == "UnorderedConsensus" else "ordered"

        def done(reply):
            if not reply.ok:
                callback({"ok": False, "error": reply.error, "mode": mode, "latency": reply.latency})
                return
            inner = reply.result.get("result") or {}
            out = {
                "ok": bool(inner.get("ok")),
                "error": inner.get("error"),
                "entity": inner.get("entity"),
                "lastBlockHash": reply.result.get("lastBlockHash"),
                "mode": mode,
                "latency": reply.latency,
            }
            if self.fault_policy == "FailEarly":
                self._read_check(query, reply.result, out, callback, RECHECK_ATTEMPTS)
            else:
                callback(out)

        self.node.client.submit({"type": "read", "query": query}, ordering_mode, done)

    def _read_check(self, query, consensus, out, callback, attempts) -> None:
        verdict = self.compare_read(query, consensus)
        if verdict != "consistent" and attempts > 1:
            # Re-read through consensus as well: the system may simply have moved on.
            def again(reply):
                if reply.ok:
                    self._read_check(query, reply.result, out, callback, attempts - 1)
                else:
                    self._read_check(query, consensus, out, callback, 1)

            self.node.transport.call_later(
                RECHECK_DELAY,
                lambda: self.node.client.submit({"type": "read", "query": query}, "unordered", again),
            )
            return
        out["divergence"] = verdict != "consistent"
        if out["divergence"]:
            self.node.note_divergence("read", {"query": query})
            self.recover_node(lambda ok: None)
        callback(out)

    def compare_read(self, query: dict, consensus: dict) -> str:
        local = self.node.engine.read(query)
        if local.consensus() == consensus.get("result"):
            return "consistent"
        return "divergent"

    def detect_divergence(self, trigger: str, query: dict | None, callback) -> None:
        """Compare local and consensus views on demand.

        ``callback("consistent" | "divergent")``.  Under FailEarly a divergent
        verdict also triggers recovery.
        """
        query = query or {"query": "list-cases"}

        def done(out):
            callback("divergent" if out.get("divergence") else "consistent")

        saved = self.fault_policy
        self.fault_policy = "FailEarly" if saved == "FailEarly" else "Manual"
        try:
            ordering_mode = "unordered" if trigger == "read" else "ordered"

            def reply_cb(reply):
                if not reply.ok:
                    callback("unknown")
                    return
                out = {}
                if saved == "FailEarly":
                    self._read_check(query, reply.result, out, done, RECHECK_ATTEMPTS)
                else:
                    verdict = self.compare_read(query, reply.result)
                    if verdict != "consistent":
                        self.node.note_divergence(trigger, {"query": query})
                    callback(verdict)

            self.node.client.submit({"type": "read", "query": query}, ordering_mode, reply_cb)
        finally:
            self.fault_policy = saved

    # -- incoming blocks ----------------------------------------------------

    def apply_incoming(self, block, op: WorkflowOperation | None = None):
        """Hand an ordered block to the engine, enforcing work item ownership."""
        return self.node.apply_block(block, op)

    # -- recovery and startup -----------------------------------------------

    def recover_node(self, callback) -> None:
        self.node.recover(callback)

    def startup_sequence(self, callback) -> None:
        self.node.startup(callback)
