"""One workflow node: engine, block service, ordering replica and gateway.

The node is the application the ordering replica drives.  Ordered writes
become blocks first and are then handed to the engine; reads never touch
the chain.  All work happens on the transport's event loop.
"""

from __future__ import annotations

import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

from .blockstore import (
    ChainStore,
    PeerMessage,
    accept_blocks,
    decode_blocks,
    serve_peer,
    verify_chain,
)
from .encoding import ZERO_DIGEST, canonical
from .engine import EngineState, OperationResult, WorkflowOperation
from .gateway import FAULT_POLICIES, READ_MODES, Gateway
from .ordering import KeyRing, OrderingClient, Replica, ViewConfig
from .ordering.config import InvalidConfig
from .ordering.messages import CH_CLIENT, CH_GATEWAY, CH_ORDER, CH_PEER, BadMessage, open_envelope, seal

log = logging.getLogger(__name__)

LOCAL_RESULTS = 4096
FETCH_TIMEOUT = 1000.0
JOIN_RETRY = 300.0


@dataclass
class MemberAddress:
    id: int
    host: str = "127.0.0.1"
    port: int = 0
    monitorPort: int = 0

    def to_dict(self) -> dict:
        return {"id": self.id, "host": self.host, "port": self.port, "monitorPort": self.monitorPort}


@dataclass
class NodeConfig:
    """Everything a node needs to start.  Loaded from a JSON file in real mode."""

    nodeId: int
    members: list[MemberAddress]
    f: int
    clusterSecret: str
    operatorKey: str = ""
    operatorToken: str = ""
    readMode: str = "LocalBypass"
    faultPolicy: str = "KeepOperating"
    dataDir: str | None = None
    hashFunction: str = "sha256"
    peers: list[int] = field(default_factory=list)
    initialView: list[int] | None = None
    viewChangeMs: float = 500.0
    consensusMs: float = 5000.0
    retransmitMs: float = 1000.0
    checkpointInterval: int = 64
    snapshotEvery: int = 1024
    pipeline: int = 4
    maxBatch: int = 64

    def __post_init__(self):
        self.members = [m if isinstance(m, MemberAddress) else MemberAddress(**m) for m in self.members]
        self.validate()

    @property
    def member_ids(self) -> list[int]:
        return [m.id for m in self.members]

    @property
    def view_members(self) -> list[int]:
        return list(self.initialView) if self.initialView is not None else self.member_ids

    def address(self, node_id: int) -> MemberAddress:
        for m in self.members:
            if m.id == node_id:
                return m
        raise KeyError(node_id)

    def validate(self) -> None:
        ids = self.member_ids
        if len(set(ids)) != len(ids):
            raise InvalidConfig("duplicate member id")
        if self.nodeId not in ids:
            raise InvalidConfig(f"nodeId {self.nodeId} is not in the member list")
        view = self.view_members
        if any(v not in ids for v in view):
            raise InvalidConfig("initial view names an unknown member")
        if len(view) < 3 * self.f + 1:
            raise InvalidConfig(f"{len(view)} members cannot tolerate f={self.f}")
        if self.readMode not in READ_MODES:
            raise InvalidConfig(f"unknown readMode {self.readMode!r}")
        if self.faultPolicy not in FAULT_POLICIES:
            raise InvalidConfig(f"unknown faultPolicy {self.faultPolicy!r}")
        if not self.clusterSecret:
            raise InvalidConfig("clusterSecret is required")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["members"] = [m.to_dict() for m in self.members]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NodeConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "NodeConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class Node:
    def __init__(self, config: NodeConfig, transport):
        self.cfg = config
        self.id = config.nodeId
        self.transport = transport
        self.keys = KeyRing(config.clusterSecret.encode(), config.operatorKey.encode())
        self.data_dir = Path(config.dataDir) if config.dataDir else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        self.chain = ChainStore(self._path("chain.log"), config.hashFunction)
        self.engine = EngineState()
        self.local_results: OrderedDict[int, tuple[bytes, OperationResult]] = OrderedDict()
        self.seen_requests: set[tuple[int, str]] = set()
        self.announcements: list[dict] = []
        self.observers: list = []
        self.divergences: list[dict] = []
        self.events: list[tuple[float, str, dict]] = []
        self.async_results: list[dict] = []
        self.stats = {"blocksFetched": 0, "fetchedFrom": None, "fetchedTo": None, "replayed": 0, "recoveries": 0}
        self.ready = False
        self.alive = True
        self._fetch = None
        self._startup_waiters: list = []
        self._timer_handle = None
        self._timer_due = None
        self._timers_sent: set[tuple[str, str]] = set()
        self._genesis = None
        self._since_snapshot = 0
        self._cons_fh = None

        view = ViewConfig(0, tuple(config.view_members), config.f)
        persisted = self._load_consensus()
        if persisted:
            try:
                view = ViewConfig(persisted["view"], tuple(persisted["members"]), persisted["f"])
            except (KeyError, InvalidConfig):
                persisted = None
        self._restore_local()
        self.replica = Replica(
            self.id,
            view,
            self.keys,
            transport,
            self,
            checkpoint_interval=config.checkpointInterval,
            vc_timeout=config.viewChangeMs,
            pipeline=config.pipeline,
            max_batch=config.maxBatch,
            persist=self._persist_consensus if self.data_dir else None,
        )
        self.replica.on_event = self._on_replica_event
        if persisted:
            self._restore_replica(persisted)
        incarnation = int(transport.now())
        self.client = OrderingClient(
            self.id,
            lambda: self.replica.config,
            self.keys,
            transport,
            timeout=config.consensusMs,
            retransmit=config.retransmitMs,
            id_prefix=f"{self.id}-{incarnation}",
        )
        self.gateway = Gateway(self, config.readMode, config.faultPolicy)
        transport.set_handler(self.on_message)

    # -- persistence ---------------------------------------------------------

    def _path(self, name: str) -> Path | None:
        return self.data_dir / name if self.data_dir is not None else None

    def _load_consensus(self) -> dict | None:
        p = self._path("consensus.log")
        if p is None or not p.exists():
            return None
        state, heights = None, {}
        for line in p.read_text(encoding="utf-8").splitlines():
            try:
                rec = json.loads(line)
            except ValueError:
                break  # torn tail
            if "state" in rec:
                state = rec["state"]
            elif "seq" in rec:
                heights[int(rec["height"])] = int(rec["seq"])
        if state is None:
            return None
        state = dict(state)
        state["heights"] = heights
        return state

    def _persist_consensus(self, state: dict) -> None:
        self._append_consensus({"state": state})

    def _append_consensus(self, rec: dict) -> None:
        if self.data_dir is None:
            return
        if self._cons_fh is None:
            self._cons_fh = open(self._path("consensus.log"), "ab")
        self._cons_fh.write(canonical(rec) + b"\n")
        self._cons_fh.flush()

    def _close_consensus(self) -> None:
        if self._cons_fh is not None:
            self._cons_fh.close()
            self._cons_fh = None

    def _restore_replica(self, persisted: dict) -> None:
        # Resume at the last sequence number whose block survived on disk.
        heights = persisted.get("heights", {})
        head = self.chain.head_seq
        seq = max([s for h, s in heights.items() if h <= head] + [0])
        stable = int(persisted.get("stableSeq") or 0)
        record = persisted.get("stableRecord")
        if record and stable <= seq and int(record["app"]["height"]) <= head:
            self.replica.stable_seq = stable
            self.replica.stable_record = record
        self.replica.last_exec = max(seq, self.replica.stable_seq)
        self.replica.next_seq = self.replica.last_exec + 1
        self.replica.stable_seq = min(self.replica.stable_seq, self.replica.last_exec)

    def save_snapshot(self) -> None:
        p = self._path("engine.db")
        if p is not None:
            _atomic_write(p, canonical(self.engine.to_snapshot()))
        self._since_snapshot = 0

    def _restore_local(self) -> None:
        """Load persisted chain and engine snapshot, then replay locally."""
        report = verify_chain(self.chain)
        if not report.ok:
            keep = (report.broken_at or 1) - 1
            self._event("chain-truncated", keep=keep)
            self.chain.truncate(keep)
        p = self._path("engine.db")
        if p is not None and p.exists():
            try:
                self.engine = EngineState.from_snapshot(json.loads(p.read_bytes()))
            except (ValueError, KeyError, TypeError):
                self._event("snapshot-unreadable")
                self.engine = EngineState()
        self._catch_up_engine(self.chain.head_seq)

    def _catch_up_engine(self, height: int) -> None:
        start = self.chain.seq_of(self.engine.lastBlockHash)
        if start is None or start > height:
            self.engine = EngineState()
            self.seen_requests.clear()
            start = 0
        # Requests recorded before the snapshot still count as seen.
        if start and not self.seen_requests:
            for k in range(1, start + 1):
                self._note_seen(self.chain.get(k))
        for k in range(start + 1, height + 1):
            self.apply_block(self.chain.get(k))
            self.stats["replayed"] += 1

    def _note_seen(self, blk) -> None:
        try:
            op = WorkflowOperation.from_bytes(blk.payload)
        except (ValueError, KeyError, TypeError):
            return
        self.seen_requests.add((op.originNode, op.clientRequestId))

    def close(self) -> None:
        self.replica.stop()
        if self.data_dir is not None:
            self.save_snapshot()
        self._close_consensus()
        self.chain.close()

    # -- events --------------------------------------------------------------

    def _event(self, kind: str, **detail) -> None:
        self.events.append((self.transport.now(), kind, detail))

    def _on_replica_event(self, kind: str, detail: dict) -> None:
        self._event(kind, **detail)
        if kind == "state-installed":
            self._after_install()

    def note_divergence(self, trigger: str, detail: dict) -> None:
        entry = {"at": self.transport.now(), "trigger": trigger, **detail}
        self.divergences.append(entry)
        self._event("divergence", trigger=trigger)

    def record_async_result(self, result: dict) -> None:
        self.async_results.append(result)

    def subscribe(self, fn) -> None:
        self.observers.append(fn)

    def _announce(self, anns) -> None:
        for a in anns:
            if a.scope is None or a.scope == self.id:
                d = a.to_dict()
                self.announcements.append(d)
                for fn in self.observers:
                    fn(d)

    # -- inbound messages -----------------------------------------------------

    def on_message(self, data: bytes) -> None:
        if not self.alive:
            return
        try:
            env = open_envelope(data)
        except BadMessage:
            return
        ch = env.channel
        if ch == CH_ORDER:
            self.replica.on_envelope(env)
            return
        if ch == CH_CLIENT:
            try:
                kind = env.body.get("kind")
            except ValueError:
                return
            if kind == "Reply":
                if env.verify(self.id, self.keys):
                    self.client.on_reply(env.body, env.sender)
            else:
                self.replica.on_envelope(env)
            return
        if not env.verify(self.id, self.keys):
            return
        try:
            body = env.body
        except ValueError:
            return
        if ch == CH_PEER:
            self._on_peer(body, env.sender)
        elif ch == CH_GATEWAY:
            self._on_gateway_message(body, env.sender)

    def _send(self, channel: int, dest: int, body: dict) -> None:
        self.transport.send(dest, seal(channel, self.id, body, [dest], self.keys))

    # -- replica application interface ---------------------------------------

    def _error(self, code: str) -> dict:
        return {"result": {"ok": False, "error": code, "entity": None}, "lastBlockHash": self.chain.head_hash.hex(), "height": None}

    def execute(self, seq: int, req: dict) -> dict:
        op = req.get("op") or {}
        kind = op.get("type")
        if kind == "read":
            return self._read(op.get("query") or {})
        if kind != "write":
            return self._error("malformed")
        try:
            wop = WorkflowOperation.from_dict(op.get("op") or {})
        except (ValueError, KeyError, TypeError):
            return self._error("malformed")
        if wop.originNode != req.get("client"):
            return self._error("origin-mismatch")
        if (wop.originNode, wop.clientRequestId) in self.seen_requests:
            return self._error("duplicate-request")
        blk = self.chain.append_ordered(wop.to_bytes(), wop.originNode)
        if self.data_dir is not None:
            self._append_consensus({"seq": seq, "height": blk.sequenceNumber})
        res = self.apply_block(blk, wop)
        return {"result": res.consensus(), "lastBlockHash": blk.hash.hex(), "height": blk.sequenceNumber}

    def execute_unordered(self, req: dict) -> dict:
        op = req.get("op") or {}
        if op.get("type") != "read":
            return self._error("not-a-read")
        return self._read(op.get("query") or {})

    def _read(self, query: dict) -> dict:
        res = self.engine.read(query)
        return {"result": res.consensus(), "lastBlockHash": self.chain.head_hash.hex(), "height": None}

    def checkpoint(self) -> dict:
        return {"height": self.chain.head_seq, "lastBlockHash": self.chain.head_hash.hex(), "stateDigest": self.engine.digest().hex()}

    def genesis_checkpoint(self) -> dict:
        if self._genesis is None:
            self._genesis = {"height": 0, "lastBlockHash": ZERO_DIGEST.hex(), "stateDigest": EngineState().digest().hex()}
        return self._genesis

    def apply_block(self, blk, op: WorkflowOperation | None = None) -> OperationResult:
        """Apply one chained operation to the engine."""
        if op is None:
            try:
                op = WorkflowOperation.from_bytes(blk.payload)
            except (ValueError, KeyError, TypeError):
                op = WorkflowOperation("unknown", {}, blk.originNode, "")
        self.seen_requests.add((op.originNode, op.clientRequestId))
        if op.opType == "unknown":
            self.engine.lastBlockHash = blk.hash
            self.engine.appliedCount += 1
            res, anns = OperationResult(False, "malformed"), []
        else:
            res, anns = self.engine.apply(op, blk.hash, now=self.transport.now())
        self.local_results[blk.sequenceNumber] = (blk.hash, res)
        while len(self.local_results) > LOCAL_RESULTS:
            self.local_results.popitem(last=False)
        self._announce(anns)
        self._since_snapshot += 1
        if self.data_dir is not None and self._since_snapshot >= self.cfg.snapshotEvery:
            self.save_snapshot()
        if self._has_timers():
            self.arm_workflow_timers()
        return res

    def _has_timers(self) -> bool:
        return any(t.timer is not None for s in self.engine.specs.values() for t in s.tasks)

    def describe_entity(self, entity: dict):
        if "id" in entity and entity["id"] in self.engine.items:
            return self.engine.items[entity["id"]].describe()
        if "caseId" in entity and "status" in entity:
            case = self.engine.cases.get(entity["caseId"])
            return case.describe() if case else None
        return None

    # -- state installation ---------------------------------------------------

    def install_state(self, app_record: dict, providers: list[int], done) -> None:
        """Bring chain and engine to an attested checkpoint.

        Keeps whatever local prefix is consistent, fetches the missing blocks
        from peers, replays the engine and checks the resulting digest.
        """
        try:
            height = int(app_record["height"])
            target = bytes.fromhex(app_record["lastBlockHash"])
            want_digest = app_record["stateDigest"]
        except (KeyError, TypeError, ValueError):
            done(False)
            return
        report = verify_chain(self.chain)
        if not report.ok:
            self._event("chain-truncated", keep=(report.broken_at or 1) - 1)
            self.chain.truncate((report.broken_at or 1) - 1)
        head = self.chain.head_seq
        if head >= height:
            at = self.chain.get(height).hash if height else ZERO_DIGEST
            if at != target:
                self._event("chain-diverged", height=height)
                self.chain.wipe()
            elif head > height:
                # Local blocks beyond the checkpoint were executed by this replica.
                if self.engine.lastBlockHash != self.chain.head_hash:
                    self._catch_up_engine(head)
                done(True)
                return
        if self.chain.head_seq == height:
            self._finish_install(height, want_digest, done)
            return
        order = [p for p in self.cfg.peers if p in providers] + [p for p in providers if p not in self.cfg.peers]
        self._fetch = {"height": height, "target": target, "digest": want_digest, "order": order, "idx": 0,
                       "tries": 0, "done": done, "nonce": 0, "timer": None}
        self._fetch_next()

    def _fetch_next(self) -> None:
        fx = self._fetch
        if fx is None:
            return
        if fx["tries"] >= 3 * max(1, len(fx["order"])) or not fx["order"]:
            self._fetch = None
            self._event("fetch-failed")
            fx["done"](False)
            return
        peer = fx["order"][fx["idx"] % len(fx["order"])]
        fx["tries"] += 1
        fx["nonce"] += 1
        fx["peer"] = peer
        body = {"from": self.chain.head_seq + 1, "to": fx["height"], "nonce": f"{self.id}:{fx['nonce']}"}
        self._send(CH_PEER, peer, PeerMessage("BlockRequest", self.id, body).to_dict())
        fx["timer"] = self.transport.call_later(FETCH_TIMEOUT, self._fetch_timeout, fx["nonce"])

    def _fetch_timeout(self, nonce: int) -> None:
        fx = self._fetch
        if fx is not None and fx["nonce"] == nonce:
            fx["idx"] += 1
            self._fetch_next()

    def _on_peer(self, body: dict, sender: int) -> None:
        try:
            msg = PeerMessage.from_dict(body)
        except (KeyError, TypeError, ValueError):
            return
        if msg.sender != sender:
            return
        if msg.kind == "BlockRequest":
            out = serve_peer(self.chain, msg, self.id)
            if out is not None:
                self._send(CH_PEER, sender, out.to_dict())
            return
        fx = self._fetch
        if msg.kind != "BlockSend" or fx is None or fx.get("peer") != sender:
            return
        if msg.body.get("nonce") != f"{self.id}:{fx['nonce']}":
            return
        fx["timer"].cancel()
        start = self.chain.head_seq + 1
        stored, sender_ok = accept_blocks(self.chain, decode_blocks(msg.body.get("blocks") or []), (fx["height"], fx["target"]))
        if stored:
            self.stats["blocksFetched"] += stored
            lo = self.stats["fetchedFrom"]
            self.stats["fetchedFrom"] = start if lo is None else min(lo, start)
            self.stats["fetchedTo"] = self.chain.head_seq
        if not sender_ok:
            self._event("bad-peer", peer=sender)
        if self.chain.head_seq == fx["height"]:
            self._fetch = None
            self._finish_install(fx["height"], fx["digest"], fx["done"])
            return
        fx["idx"] += 1
        self._fetch_next()

    def _finish_install(self, height: int, want_digest: str, done) -> None:
        self._catch_up_engine(height)
        if self.engine.digest().hex() != want_digest:
            # The snapshot may be stale or tampered with: replay from genesis.
            self.engine = EngineState()
            self.seen_requests.clear()
            self._catch_up_engine(height)
        ok = self.engine.digest().hex() == want_digest
        if not ok:
            self._event("digest-mismatch", height=height)
        done(ok)

    # -- startup, join and recovery -------------------------------------------

    def startup(self, callback=None) -> None:
        """Bring the node up to the consensus head; ``callback(True)`` when ready."""
        self.ready = False
        if callback is not None:
            self._startup_waiters.append(callback)
        if not self.replica.is_member:
            self._request_join()
        self.replica.request_state()

    def _after_install(self) -> None:
        if not self._startup_waiters and self.ready:
            return
        if not self.replica.is_member:
            self.transport.call_later(JOIN_RETRY, self._startup_retry)
            return
        self.ready = True
        self._event("ready", height=self.chain.head_seq)
        waiters, self._startup_waiters = self._startup_waiters, []
        for cb in waiters:
            cb(True)

    def _startup_retry(self) -> None:
        if self.ready or not self.alive:
            return
        if not self.replica.is_member:
            self._request_join()
        self.replica.request_state()

    def _request_join(self) -> None:
        contacts = [m for m in self.replica.config.members if m != self.id]
        if not contacts:
            return
        self._join_attempt = getattr(self, "_join_attempt", -1) + 1
        dest = contacts[self._join_attempt % len(contacts)]
        self._send(CH_GATEWAY, dest, {"kind": "JoinRequest", "node": self.id})

    def _on_gateway_message(self, body: dict, sender: int) -> None:
        if body.get("kind") == "JoinRequest" and body.get("node") == sender:
            if sender in self.cfg.member_ids and sender not in self.replica.config.members:
                self.reconfigure({"op": "join", "node": sender}, self.record_async_result)

    def reconfigure(self, change: dict, callback=None) -> None:
        """Submit an operator-signed membership change for ordering."""
        op = {"type": "reconfig", "change": change, "operator": self.keys.operator_tag(canonical(change))}

        def done(reply):
            if callback is not None:
                callback({"ok": reply.ok and bool(reply.result and reply.result.get("ok")),
                          "error": reply.error or (reply.result or {}).get("error"), "result": reply.result})

        self.client.submit(op, "ordered", done)

    def resume(self) -> None:
        """Come back after a pause (timers that fell due meanwhile were lost)."""
        self.alive = True
        self._timer_handle = self._timer_due = None
        if self._fetch is not None:
            done = self._fetch["done"]
            self._fetch = None
            done(False)
        self.replica.resume()
        self.client.resume()
        if self._has_timers():
            self.arm_workflow_timers()
        self.startup()

    def recover(self, callback=None) -> None:
        """Reset this node and rebuild it from the other members."""
        self.stats["recoveries"] += 1
        self._event("recovery-start")
        self.replica.stop()
        self.replica.reset()
        if self._fetch is not None and self._fetch.get("timer") is not None:
            self._fetch["timer"].cancel()
        self._fetch = None
        self.chain.wipe()
        self.engine = EngineState()
        self.local_results.clear()
        self.seen_requests.clear()
        self._timers_sent.clear()
        p = self._path("engine.db")
        if p is not None and p.exists():
            p.unlink()
        self._close_consensus()
        p = self._path("consensus.log")
        if p is not None and p.exists():
            p.unlink()
        self.startup(callback)

    # -- workflow timers -----------------------------------------------------

    def arm_workflow_timers(self) -> None:
        pending = [ev for ev in self.engine.pending_timers(self.id) if (ev.workItemId, ev.action) not in self._timers_sent]
        if not pending:
            return
        due = min(ev.due for ev in pending)
        if self._timer_due is not None and self._timer_due <= due:
            return
        if self._timer_handle is not None:
            self._timer_handle.cancel()
        self._timer_due = due
        self._timer_handle = self.transport.call_later(max(0.0, due - self.transport.now()), self._fire_timers)

    def _fire_timers(self) -> None:
        self._timer_handle = None
        self._timer_due = None
        if not self.alive:
            return
        for ev in self.engine.timers_due(self.id, self.transport.now()):
            key = (ev.workItemId, ev.action)
            if key in self._timers_sent:
                continue
            self._timers_sent.add(key)
            op = WorkflowOperation("TimerExpiry", {"workItemId": ev.workItemId, "action": ev.action}, self.id,
                                   self.client.next_id())
            self.gateway.submit_operation(op, self.record_async_result)
        self.arm_workflow_timers()

    # -- status --------------------------------------------------------------

    def status(self) -> dict:
        cfg = self.replica.config
        return {
            "nodeId": self.id,
            "ready": self.ready,
            "height": self.chain.head_seq,
            "headHash": self.chain.head_hash.hex(),
            "stateDigest": self.engine.digest().hex(),
            "view": cfg.to_dict(),
            "replicaStatus": self.replica.status,
            "lastExecuted": self.replica.last_exec,
        }
