"""PBFT-style ordering replica.

Event driven: the transport calls :meth:`Replica.on_envelope` for every
inbound message on the ordering channel and fires timers through
``transport.call_later``.  Nothing here blocks or spawns threads, so the same
code runs under the discrete-event simulator and on real sockets.

Quorums (n >= 3f+1): a slot is *prepared* with the leader's pre-prepare plus
2f matching prepares from distinct backups, and *committed* with 2f+1
matching commits (own included).  Clients accept 2f+1 identical replies.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

from ..encoding import canonical
from .config import InvalidConfig, KeyRing, ViewConfig, apply_change
from .messages import (
    CH_CLIENT,
    CH_ORDER,
    NULL_DIGEST,
    BadMessage,
    Envelope,
    batch_digest,
    open_envelope,
    request_digest,
    seal,
)

log = logging.getLogger(__name__)

CHECKPOINT_INTERVAL = 64
WATERMARK_WINDOW = 256
VIEW_CHANGE_TIMEOUT = 500.0
REPLY_CACHE = 100_000


@dataclass
class Slot:
    seq: int
    view: int
    digest: str | None = None
    reqs: list = field(default_factory=list)  # request digests
    pp_raw: bytes | None = None
    prepares: dict = field(default_factory=dict)  # sender -> (digest, raw)
    commits: dict = field(default_factory=dict)  # sender -> digest
    sent_prepare: bool = False
    prepared: bool = False
    sent_commit: bool = False
    committed: bool = False
    executed: bool = False


class Replica:
    def __init__(
        self,
        node_id: int,
        config: ViewConfig,
        keys: KeyRing,
        transport,
        app,
        *,
        checkpoint_interval: int = CHECKPOINT_INTERVAL,
        window: int = WATERMARK_WINDOW,
        vc_timeout: float = VIEW_CHANGE_TIMEOUT,
        pipeline: int = 4,
        max_batch: int = 64,
        persist=None,
    ):
        self.id = node_id
        self.config = config
        self.keys = keys
        self.transport = transport
        self.app = app
        self.checkpoint_interval = checkpoint_interval
        self.window = window
        self.vc_timeout = vc_timeout
        self.pipeline = pipeline
        self.max_batch = max_batch
        self.persist = persist
        self.on_event = None  # optional callback(kind, detail)
        self.reset()

    def reset(self) -> None:
        """Forget all consensus state (used by node recovery)."""
        for name in ("_req_timer", "_vc_timer", "_stall_timer", "_transfer_timer", "_catchup_timer"):
            self._cancel(getattr(self, name, None))
        self.status = "normal"
        self.log: dict[int, Slot] = {}
        self.requests: dict[str, dict] = {}
        self.pending: OrderedDict[str, None] = OrderedDict()
        self.assigned: set[str] = set()
        self.reply_cache: OrderedDict = OrderedDict()
        self.last_exec = 0
        self.next_seq = 1
        self.stable_seq = 0
        self.stable_record: dict | None = None
        self.stable_proof: list[bytes] = []
        self.my_checkpoints: dict[int, tuple[str, dict]] = {}
        self.cp_votes: dict[int, dict[int, tuple[str, bytes]]] = {}
        self.prepared_certs: dict[int, dict] = {}
        self.vcs: dict[int, dict[int, dict]] = {}
        self.future: list[Envelope] = []
        self.vc_attempts = 0
        self.vc_target = self.config.viewNumber
        self.view_changes = 0
        self.executed_log: list[tuple[int, str]] = []
        self._req_timer = None
        self._vc_timer = None
        self._stall_timer = None
        self._transfer = None
        self._transfer_timer = None
        self._nonce = 0
        self._catchup_timer = None
        self._resume_vc = None
        self._vc_repeats = 0
        self.newer_views: dict[int, set] = {}
        self.behind_seq = 0

    # -- helpers -------------------------------------------------------------

    @property
    def view(self) -> int:
        return self.config.viewNumber

    @property
    def f(self) -> int:
        return self.config.f

    @property
    def is_leader(self) -> bool:
        return self.config.leader == self.id

    @property
    def is_member(self) -> bool:
        return self.id in self.config.members

    def _event(self, kind: str, **detail) -> None:
        if self.on_event is not None:
            self.on_event(kind, detail)

    def _broadcast(self, body: dict) -> bytes:
        raw = seal(CH_ORDER, self.id, body, self.config.members, self.keys)
        for m in self.config.members:
            if m != self.id:
                self.transport.send(m, raw)
        return raw

    def _send(self, dest: int, body: dict, channel: int = CH_ORDER) -> None:
        self.transport.send(dest, seal(channel, self.id, body, [dest], self.keys))

    def _timer(self, delay, fn, *args):
        return self.transport.call_later(delay, fn, *args)

    @staticmethod
    def _cancel(handle) -> None:
        if handle is not None:
            handle.cancel()

    def _slot(self, seq: int) -> Slot:
        s = self.log.get(seq)
        if s is None or s.view < self.view:
            executed = s.executed if s is not None else False
            s = Slot(seq, self.view, executed=executed)
            self.log[seq] = s
        return s

    def in_window(self, seq: int) -> bool:
        return self.stable_seq < seq <= self.stable_seq + self.window

    # -- inbound -------------------------------------------------------------

    def on_envelope(self, env: Envelope) -> None:
        if self.status == "stopped":
            return
        if not env.verify(self.id, self.keys):
            return
        try:
            body = env.body
        except ValueError:
            return
        kind = body.get("kind")
        if env.channel == CH_CLIENT:
            if kind == "Request":
                self.on_request(body, env.sender)
            return
        if kind == "StateRequest":
            self.on_state_request(body, env.sender)
            return
        if kind == "StateReply":
            self.on_state_reply(body, env.sender)
            return
        if env.sender not in self.config.members:
            return
        if kind == "ViewChange":
            self.on_view_change(env)
            return
        if kind == "NewView":
            self.on_new_view(env)
            return
        if kind == "Checkpoint":
            self.on_checkpoint(env)
            return
        view = body.get("view")
        if not isinstance(view, int):
            return
        if view > self.view or (self.status == "view-change" and view >= self.view):
            if len(self.future) < 10_000:
                self.future.append(env)
            if view > self.view:
                self._note_newer_view(view, env.sender)
            return
        if view < self.view or self.status != "normal" and self.status != "transfer":
            return
        if kind == "PrePrepare":
            self.on_pre_prepare(env)
        elif kind == "Prepare":
            self.on_prepare(env)
        elif kind == "Commit":
            self.on_commit(env)

    # -- requests ------------------------------------------------------------

    def on_request(self, req: dict, sender: int) -> None:
        if req.get("client") != sender:
            return
        key = (req.get("client"), req.get("id"))
        cached = self.reply_cache.get(key)
        if cached is not None:
            self._reply(req, cached)
            return
        if req.get("mode") == "unordered":
            if self.status in ("normal", "view-change"):
                self._reply(req, self.app.execute_unordered(req))
            return
        d = request_digest(req)
        if d in self.requests:
            if self.is_leader and self.status == "normal":
                self.try_propose()
            return
        self.requests[d] = req
        self.pending[d] = None
        self._arm_request_timer()
        if self.is_leader and self.status == "normal":
            self.try_propose()
        else:
            # a pre-prepare may have been waiting for this body
            for s in self.log.values():
                if s.digest and not s.sent_prepare and d in s.reqs:
                    self._maybe_prepare(s)

    def _reply(self, req: dict, result: dict) -> None:
        body = {"kind": "Reply", "view": self.view, "client": req["client"], "id": req["id"], "result": result}
        self._send(req["client"], body, CH_CLIENT)

    def try_propose(self) -> None:
        """Leader: assign sequence numbers to pending requests."""
        if not self.is_leader or self.status != "normal":
            return
        while True:
            inflight = self.next_seq - 1 - self.last_exec
            if inflight >= self.pipeline or not self.in_window(self.next_seq):
                return
            batch = []
            for d in self.pending:
                if d not in self.assigned:
                    batch.append(d)
                    if len(batch) >= self.max_batch:
                        break
            if not batch:
                return
            seq = self.next_seq
            self.next_seq += 1
            digest = batch_digest(batch)
            # Bodies travel with the proposal so backups never wait on a client
            # that may have crashed after reaching only the leader.
            body = {"kind": "PrePrepare", "view": self.view, "seq": seq, "digest": digest, "reqs": batch,
                    "bodies": [self.requests[d] for d in batch]}
            raw = self._broadcast(body)
            s = self._slot(seq)
            s.digest, s.reqs, s.pp_raw = digest, batch, raw
            s.sent_prepare = True  # the leader's pre-prepare stands in for its prepare
            self.assigned.update(batch)
            self._check_prepared(s)

    # -- normal case ---------------------------------------------------------

    def on_pre_prepare(self, env: Envelope) -> None:
        b = env.body
        seq = b.get("seq")
        if env.sender != self.config.leader or not isinstance(seq, int) or not self.in_window(seq):
            return
        reqs = b.get("reqs") or []
        if not isinstance(reqs, list) or batch_digest(reqs) != b.get("digest"):
            return
        s = self._slot(seq)
        if s.digest is not None:
            return  # at most one pre-prepare per (view, seq); equivocation ignored
        wanted = set(reqs)
        for r in b.get("bodies") or []:
            if isinstance(r, dict):
                d = request_digest(r)
                if d in wanted and d not in self.requests:
                    self.requests[d] = r
        s.digest, s.reqs, s.pp_raw = b["digest"], list(reqs), env.raw
        self.assigned.update(reqs)
        self._maybe_prepare(s)
        self._check_prepared(s)

    def _maybe_prepare(self, s: Slot) -> None:
        if s.sent_prepare or s.digest is None or s.view != self.view:
            return
        if not all(d in self.requests for d in s.reqs):
            return
        s.sent_prepare = True
        body = {"kind": "Prepare", "view": s.view, "seq": s.seq, "digest": s.digest}
        raw = self._broadcast(body)
        s.prepares[self.id] = (s.digest, raw)
        self._check_prepared(s)

    def on_prepare(self, env: Envelope) -> None:
        b = env.body
        seq = b.get("seq")
        if not isinstance(seq, int) or not self.in_window(seq) or env.sender == self.config.leader:
            return
        s = self._slot(seq)
        if env.sender not in s.prepares:
            s.prepares[env.sender] = (b.get("digest"), env.raw)
        self._check_prepared(s)

    def _check_prepared(self, s: Slot) -> None:
        if s.prepared or s.digest is None:
            return
        if not all(d in self.requests for d in s.reqs):
            return
        matching = [raw for (d, raw) in s.prepares.values() if d == s.digest]
        if len(matching) < 2 * self.f:
            return
        s.prepared = True
        self.prepared_certs[s.seq] = {
            "seq": s.seq,
            "view": s.view,
            "digest": s.digest,
            "reqs": [self.requests[d] for d in s.reqs],
            "pp": s.pp_raw.hex(),
            "ps": [r.hex() for r in matching[: 2 * self.f]],
        }
        if not s.sent_commit:
            s.sent_commit = True
            self._broadcast({"kind": "Commit", "view": s.view, "seq": s.seq, "digest": s.digest})
            s.commits[self.id] = s.digest
        self._check_committed(s)

    def on_commit(self, env: Envelope) -> None:
        b = env.body
        seq = b.get("seq")
        if not isinstance(seq, int) or not self.in_window(seq):
            return
        s = self._slot(seq)
        s.commits.setdefault(env.sender, b.get("digest"))
        self._check_committed(s)

    def _check_committed(self, s: Slot) -> None:
        if s.committed or not s.prepared:
            return
        if sum(1 for d in s.commits.values() if d == s.digest) < 2 * self.f + 1:
            return
        s.committed = True
        self.try_execute()

    # -- execution -----------------------------------------------------------

    def try_execute(self) -> None:
        if self.status == "transfer":
            return
        while True:
            s = self.log.get(self.last_exec + 1)
            if s is None or not s.committed or not all(d in self.requests for d in s.reqs):
                break
            reconfigured = self._execute_batch(s.seq, [self.requests[d] for d in s.reqs], s.digest)
            s.executed = True
            if reconfigured:
                break
        self._arm_stall_timer()
        if self.is_leader and self.status == "normal":
            self.try_propose()

    def _execute_batch(self, seq: int, reqs: list[dict], digest: str) -> bool:
        reconfigured = False
        for req in reqs:
            d = request_digest(req)
            self.pending.pop(d, None)
            self.assigned.discard(d)
            key = (req["client"], req["id"])
            if key in self.reply_cache:
                self._reply(req, self.reply_cache[key])
                continue
            op = req.get("op") or {}
            if op.get("type") == "reconfig":
                result = self._execute_reconfig(op)
                reconfigured = reconfigured or result.get("ok", False)
            else:
                result = self.app.execute(seq, req)
            self.reply_cache[key] = result
            if len(self.reply_cache) > REPLY_CACHE:
                self.reply_cache.popitem(last=False)
            self._reply(req, result)
        self.last_exec = seq
        self.executed_log.append((seq, digest))
        self.vc_attempts = 0
        if seq % self.checkpoint_interval == 0:
            self._take_checkpoint(seq)
        self._arm_request_timer(restart=True)
        if reconfigured:
            self._install_reconfig()
        return reconfigured

    def _execute_reconfig(self, op: dict) -> dict:
        change = op.get("change") or {}
        if not self.keys.check_operator(canonical(change), op.get("operator", "")):
            return {"ok": False, "error": "unauthorized"}
        try:
            new = apply_change(self.config, change)
        except (InvalidConfig, KeyError, TypeError, ValueError) as exc:
            return {"ok": False, "error": "invalid-config", "detail": str(exc)}
        self._new_config = new
        return {"ok": True, "config": {"members": list(new.members), "f": new.f}}

    def _install_reconfig(self) -> None:
        # Takes effect right after the reconfiguration's sequence number on
        # every replica: bump the view, drop undecided later slots.
        self.config = self._new_config
        self.vc_target = self.view
        for n in [n for n in self.log if n > self.last_exec]:
            del self.log[n]
        for n in [n for n in self.prepared_certs if n > self.last_exec]:
            del self.prepared_certs[n]
        self.assigned.clear()
        self.next_seq = self.last_exec + 1
        self._event("reconfigured", members=list(self.config.members), f=self.f, view=self.view)
        self._persist()
        self._replay_future()
        if self.is_leader:
            self.try_propose()

    # -- checkpoints ---------------------------------------------------------

    def _checkpoint_record(self, seq: int) -> dict:
        return {"seq": seq, "app": self.app.checkpoint(), "members": list(self.config.members), "f": self.f}

    def _take_checkpoint(self, seq: int) -> None:
        record = self._checkpoint_record(seq)
        d = request_digest(record)
        self.my_checkpoints[seq] = (d, record)
        raw = self._broadcast({"kind": "Checkpoint", "seq": seq, "digest": d})
        self.cp_votes.setdefault(seq, {})[self.id] = (d, raw)
        self._check_stable(seq)

    def on_checkpoint(self, env: Envelope) -> None:
        b = env.body
        seq = b.get("seq")
        if not isinstance(seq, int) or seq <= self.stable_seq:
            return
        self.cp_votes.setdefault(seq, {}).setdefault(env.sender, (b.get("digest"), env.raw))
        self._check_stable(seq)

    def _check_stable(self, seq: int) -> None:
        votes = self.cp_votes.get(seq, {})
        tally: dict[str, list[bytes]] = {}
        for d, raw in votes.values():
            tally.setdefault(d, []).append(raw)
        for d, raws in tally.items():
            if len(raws) < 2 * self.f + 1:
                continue
            mine = self.my_checkpoints.get(seq)
            if mine is None:
                if seq > self.last_exec and seq > self.behind_seq:
                    # Others proved progress we have not made; give the normal
                    # path a grace period before fetching state.
                    self.behind_seq = seq
                    self._event("behind", seq=seq)
                    self._arm_stall_timer()
                return
            if mine[0] != d:
                self._event("checkpoint-mismatch", seq=seq)
                return
            self._make_stable(seq, mine[1], raws)
            return

    def _make_stable(self, seq: int, record: dict, proof: list[bytes]) -> None:
        if seq <= self.stable_seq:
            return
        self.stable_seq = seq
        self.stable_record = record
        self.stable_proof = list(proof)
        for n in [n for n in self.log if n <= seq]:
            slot = self.log.pop(n)
            for d in slot.reqs:
                if d not in self.pending:
                    self.requests.pop(d, None)
        for table in (self.prepared_certs, self.my_checkpoints, self.cp_votes):
            for n in [n for n in table if n <= seq]:
                del table[n]
        self._persist()
        if self.is_leader:
            self.try_propose()

    def _persist(self) -> None:
        if self.persist is not None:
            self.persist(
                {
                    "view": self.view,
                    "members": list(self.config.members),
                    "f": self.f,
                    "lastExecuted": self.last_exec,
                    "stableSeq": self.stable_seq,
                    "stableRecord": self.stable_record,
                }
            )

    # -- timers --------------------------------------------------------------

    def _arm_request_timer(self, restart: bool = False) -> None:
        if restart:
            self._cancel(self._req_timer)
            self._req_timer = None
        if self.pending and self._req_timer is None and self.status == "normal" and self.is_member:
            self._req_timer = self._timer(self.vc_timeout * (2**self.vc_attempts), self._request_timeout)
        elif not self.pending:
            self._cancel(self._req_timer)
            self._req_timer = None

    def _request_timeout(self) -> None:
        self._req_timer = None
        if self.pending and self.status == "normal":
            self._event("request-timeout", view=self.view)
            self.start_view_change(self.view + 1)

    def _arm_stall_timer(self) -> None:
        stuck = self.behind_seq > self.last_exec
        stuck = stuck or any(n > self.last_exec + 1 and s.committed for n, s in self.log.items())
        head = self.log.get(self.last_exec + 1)
        if head is not None and head.committed:
            stuck = True  # committed but request bodies missing
        if not stuck:
            self._cancel(self._stall_timer)
            self._stall_timer = None
            return
        if self._stall_timer is None:
            at = self.last_exec
            self._stall_timer = self._timer(2 * self.vc_timeout, self._stall_check, at)

    def _stall_check(self, at: int) -> None:
        self._stall_timer = None
        if self.last_exec == at and self.status in ("normal", "view-change"):
            self._event("stalled", seq=at)
            self.request_state()
        else:
            self._arm_stall_timer()

    def _note_newer_view(self, view: int, sender: int) -> None:
        # f+1 replicas already working in a view we have not installed means
        # we missed its NewView; after a grace period fetch state instead.
        seen = self.newer_views.setdefault(view, set())
        seen.add(sender)
        if len(seen) >= self.f + 1 and self._catchup_timer is None:
            self._catchup_timer = self._timer(self.vc_timeout, self._catch_up_view, view)

    def _catch_up_view(self, view: int) -> None:
        self._catchup_timer = None
        if self.view < view and self.status != "stopped":
            self._event("missed-view", view=view)
            self.newer_views = {v: s for v, s in self.newer_views.items() if v > view}
            self.request_state()

    # -- view change ---------------------------------------------------------

    def start_view_change(self, new_view: int) -> None:
        if new_view <= self.view and self.status == "normal":
            return
        if self.status == "view-change" and new_view <= self.vc_target:
            return
        if not self.is_member or self.status == "transfer":
            return  # catching up; the transfer brings the current view along
        self.status = "view-change"
        self.vc_target = new_view
        self._cancel(self._req_timer)
        self._req_timer = None
        certs = [c for n, c in sorted(self.prepared_certs.items()) if n > self.stable_seq]
        body = {
            "kind": "ViewChange",
            "view": new_view,
            "stableSeq": self.stable_seq,
            "stableDigest": request_digest(self.stable_record) if self.stable_record else None,
            "proof": [r.hex() for r in self.stable_proof],
            "prepared": certs,
        }
        raw = self._broadcast(body)
        self.vcs.setdefault(new_view, {})[self.id] = self._parse_vc(open_envelope(raw), trusted=True)
        self._event("view-change-start", view=new_view)
        self._cancel(self._vc_timer)
        self._vc_timer = self._timer(self.vc_timeout * (2**self.vc_attempts), self._vc_timeout, new_view)
        self._maybe_new_view(new_view)

    def _vc_timeout(self, target: int) -> None:
        self._vc_timer = None
        if self.status != "view-change" or self.vc_target != target:
            return
        if len(self.vcs.get(target, {})) >= 2 * self.f + 1:
            self.vc_attempts += 1
            self.start_view_change(target + 1)
            return
        # Nobody else wants this view yet: repeat the request, do not escalate,
        # and meanwhile catch up on whatever the others executed.
        mine = self.vcs.get(target, {}).get(self.id)
        if mine is not None:
            for m in self.config.members:
                if m != self.id:
                    self.transport.send(m, mine["raw"])
        self._vc_repeats += 1
        delay = self.vc_timeout * (2 ** min(self.vc_attempts + self._vc_repeats, 6))
        self._vc_timer = self._timer(delay, self._vc_timeout, target)
        if self._transfer is None:
            self.request_state()

    def _verify_embedded(self, raw_hex: str, kind: str) -> dict | None:
        try:
            env = open_envelope(bytes.fromhex(raw_hex))
        except (ValueError, BadMessage):
            return None
        if env.channel != CH_ORDER or env.sender not in self.config.members or not env.verify(self.id, self.keys):
            return None
        try:
            body = env.body
        except ValueError:
            return None
        if body.get("kind") != kind:
            return None
        return dict(body, _sender=env.sender)

    def _valid_cert(self, c: dict) -> bool:
        try:
            seq, view, digest = int(c["seq"]), int(c["view"]), c["digest"]
            reqs = c["reqs"]
        except (KeyError, TypeError, ValueError):
            return False
        if batch_digest([request_digest(r) for r in reqs]) != digest:
            return False
        pp = self._verify_embedded(c.get("pp", ""), "PrePrepare")
        if pp is None or pp["_sender"] != self.config.leader_of(view):
            return False
        if (pp.get("view"), pp.get("seq"), pp.get("digest")) != (view, seq, digest):
            return False
        senders = set()
        for raw in c.get("ps", []):
            p = self._verify_embedded(raw, "Prepare")
            if p is None or (p.get("view"), p.get("seq"), p.get("digest")) != (view, seq, digest):
                continue
            if p["_sender"] != pp["_sender"]:
                senders.add(p["_sender"])
        return len(senders) >= 2 * self.f

    def _valid_proof(self, seq: int, digest, proof: list) -> bool:
        if seq == 0:
            return True
        senders = set()
        for raw in proof:
            cp = self._verify_embedded(raw, "Checkpoint")
            if cp is not None and cp.get("seq") == seq and cp.get("digest") == digest:
                senders.add(cp["_sender"])
        return len(senders) >= 2 * self.f + 1

    def _parse_vc(self, env: Envelope, trusted: bool = False) -> dict | None:
        b = env.body
        try:
            stable = int(b["stableSeq"])
            certs = list(b["prepared"])
        except (KeyError, TypeError, ValueError):
            return None
        if not trusted:
            if not self._valid_proof(stable, b.get("stableDigest"), b.get("proof", [])):
                # A replica that caught up by state transfer may lack a proof it
                # can present; fall back to claiming nothing stable.
                return None
            certs = [c for c in certs if self._valid_cert(c)]
        return {"sender": env.sender, "view": b["view"], "stableSeq": stable, "prepared": certs, "raw": env.raw}

    def on_view_change(self, env: Envelope) -> None:
        v = env.body.get("view")
        if not isinstance(v, int) or v <= self.view and self.status == "normal":
            return
        if v < self.view:
            return
        parsed = self._parse_vc(env)
        if parsed is None:
            return
        self.vcs.setdefault(v, {})[env.sender] = parsed
        # join a view change once f+1 replicas want a higher view
        current = self.vc_target if self.status == "view-change" else self.view
        higher = {}
        for view, msgs in self.vcs.items():
            if view > current:
                for sender in msgs:
                    higher.setdefault(sender, view)
                    higher[sender] = min(higher[sender], view)
        if len(higher) >= self.f + 1:
            self.start_view_change(min(higher.values()))
        self._maybe_new_view(v)

    def _compute_new_view(self, vcs: list[dict]) -> tuple[int, list[dict]]:
        min_s = max(vc["stableSeq"] for vc in vcs)
        best: dict[int, dict] = {}
        for vc in vcs:
            for c in vc["prepared"]:
                n = int(c["seq"])
                if n <= min_s:
                    continue
                if n not in best or int(c["view"]) > int(best[n]["view"]):
                    best[n] = c
        max_s = max([min_s] + list(best))
        out = []
        for n in range(min_s + 1, max_s + 1):
            c = best.get(n)
            if c is None:
                out.append({"seq": n, "digest": NULL_DIGEST, "reqs": []})
            else:
                out.append({"seq": n, "digest": c["digest"], "reqs": c["reqs"]})
        return min_s, out

    def _maybe_new_view(self, v: int) -> None:
        if self.status != "view-change" or v != self.vc_target or self.config.leader_of(v) != self.id:
            return
        msgs = self.vcs.get(v, {})
        if len(msgs) < 2 * self.f + 1 or self.id not in msgs:
            return
        chosen = [msgs[self.id]] + [msgs[k] for k in sorted(msgs) if k != self.id][: 2 * self.f]
        min_s, plan = self._compute_new_view(chosen)
        pps = {}
        for e in plan:
            pp = {"kind": "PrePrepare", "view": v, "seq": e["seq"], "digest": e["digest"],
                  "reqs": [request_digest(r) for r in e["reqs"]], "bodies": e["reqs"]}
            pps[e["seq"]] = seal(CH_ORDER, self.id, pp, self.config.members, self.keys)
        body = {
            "kind": "NewView",
            "view": v,
            "vcs": [vc["raw"].hex() for vc in chosen],
            "plan": [{"seq": e["seq"], "digest": e["digest"]} for e in plan],
            "pps": [pps[e["seq"]].hex() for e in plan],
        }
        self._broadcast(body)
        self._install_view(v, min_s, plan, pps)

    def on_new_view(self, env: Envelope) -> None:
        b = env.body
        v = b.get("view")
        if not isinstance(v, int) or env.sender != self.config.leader_of(v):
            return
        if v < self.view or (v == self.view and self.status == "normal"):
            return
        vcs = []
        seen = set()
        for raw_hex in b.get("vcs", []):
            try:
                venv = open_envelope(bytes.fromhex(raw_hex))
            except (ValueError, BadMessage):
                return
            if venv.sender in seen or venv.sender not in self.config.members:
                return
            if venv.sender == self.id:
                parsed = self._parse_vc(venv, trusted=True) if venv.verify(self.id, self.keys) else None
            else:
                parsed = self._parse_vc(venv) if venv.verify(self.id, self.keys) else None
            if parsed is None or parsed["view"] != v:
                return
            seen.add(venv.sender)
            vcs.append(parsed)
        if len(vcs) < 2 * self.f + 1:
            return
        min_s, plan = self._compute_new_view(vcs)
        if [{"seq": e["seq"], "digest": e["digest"]} for e in plan] != b.get("plan"):
            return
        raw_pps = b.get("pps") or []
        if len(raw_pps) != len(plan):
            return
        pps = {}
        for e, raw_hex in zip(plan, raw_pps):
            pp = self._verify_embedded(raw_hex, "PrePrepare")
            if pp is None or pp["_sender"] != env.sender:
                return
            if (pp.get("view"), pp.get("seq"), pp.get("digest")) != (v, e["seq"], e["digest"]):
                return
            pps[e["seq"]] = bytes.fromhex(raw_hex)
        self._install_view(v, min_s, plan, pps)

    def _install_view(self, v: int, min_s: int, plan: list[dict], pps: dict[int, bytes]) -> None:
        self.config = self.config.with_view(v)
        self.vc_target = v
        self.status = "transfer" if self._transfer is not None else "normal"
        self._resume_vc = None
        self._vc_repeats = 0
        self.view_changes += 1
        self._cancel(self._vc_timer)
        self._vc_timer = None
        for view in [x for x in self.vcs if x <= v]:
            del self.vcs[view]
        max_s = plan[-1]["seq"] if plan else min_s
        for n in [n for n in self.log if n > max(max_s, self.last_exec)]:
            del self.log[n]
        self.assigned.clear()
        for e in plan:
            n = e["seq"]
            for r in e["reqs"]:
                d = request_digest(r)
                if d not in self.requests:
                    self.requests[d] = r
                if n > self.last_exec and self._request_pending_ok(r):
                    self.pending.setdefault(d, None)
            old = self.log.get(n)
            s = Slot(n, v, executed=old.executed if old else False)
            s.digest = e["digest"]
            s.reqs = [request_digest(r) for r in e["reqs"]]
            s.pp_raw = pps[n]
            if self.is_leader:
                s.sent_prepare = True
            self.log[n] = s
            if n > self.last_exec:
                self.assigned.update(s.reqs)
        self.next_seq = max(max_s, self.last_exec) + 1
        self._event("view-installed", view=v, leader=self.config.leader)
        self._persist()
        for e in plan:
            s = self.log[e["seq"]]
            self._maybe_prepare(s)
            self._check_prepared(s)
        if min_s > self.last_exec:
            self.request_state()
        self._replay_future()
        self._arm_request_timer(restart=True)
        self.try_execute()
        if self.is_leader:
            self.try_propose()

    def _request_pending_ok(self, req: dict) -> bool:
        return (req.get("client"), req.get("id")) not in self.reply_cache

    def _replay_future(self) -> None:
        keep, ready = [], []
        for env in self.future:
            v = env.body.get("view")
            (ready if v == self.view else keep if isinstance(v, int) and v > self.view else []).append(env)
        self.future = keep
        for env in ready:
            self.on_envelope(env)

    # -- state transfer ------------------------------------------------------

    def request_state(self, providers=None) -> None:
        """Fetch an attested checkpoint plus the requests executed after it."""
        if self._transfer is not None:
            return
        self._nonce += 1
        nonce = f"{self.id}:{self._nonce}"
        providers = [m for m in (providers or self.config.members) if m != self.id]
        resume_vc = self.vc_target if self.status == "view-change" else None
        if self._resume_vc is not None and resume_vc is None:
            resume_vc = self._resume_vc
        self._resume_vc = resume_vc
        self._transfer = {"nonce": nonce, "replies": {}, "providers": providers, "installing": False, "sends": 1}
        self.status = "transfer"
        self._cancel(self._vc_timer)
        self._vc_timer = None
        self._event("state-request", nonce=nonce)
        for m in providers:
            self._send(m, {"kind": "StateRequest", "nonce": nonce})
        self._cancel(self._transfer_timer)
        self._transfer_timer = self._timer(2 * self.vc_timeout, self._transfer_retry, nonce)

    def _transfer_retry(self, nonce: str) -> None:
        self._transfer_timer = None
        t = self._transfer
        if t is None or t["nonce"] != nonce or t["installing"]:
            return
        if t["sends"] < 4:
            # Ask the silent providers again; replies gathered so far still count.
            t["sends"] += 1
            for m in t["providers"]:
                if m not in t["replies"]:
                    self._send(m, {"kind": "StateRequest", "nonce": nonce})
            self._transfer_timer = self._timer(2 * self.vc_timeout, self._transfer_retry, nonce)
            return
        providers = t["providers"]
        self._transfer = None
        self._event("state-retry")
        self.request_state(providers)

    def on_state_request(self, body: dict, sender: int) -> None:
        # Answer even while catching up: the requester needs 2f+1 matching
        # records, so a stale answer cannot mislead it.
        if self.status == "stopped":
            return
        record = self.stable_record or self._genesis_record()
        entries = []
        for n in range(self.stable_seq + 1, self.last_exec + 1):
            s = self.log.get(n)
            if s is None or not all(d in self.requests for d in s.reqs):
                break
            entries.append({"seq": n, "reqs": [self.requests[d] for d in s.reqs]})
        self._send(
            sender,
            {
                "kind": "StateReply",
                "nonce": body.get("nonce"),
                "record": record,
                "proof": [r.hex() for r in self.stable_proof],
                "view": self.view,
                "entries": entries,
            },
        )

    def _genesis_record(self) -> dict:
        return {"seq": 0, "app": self.app.genesis_checkpoint(), "members": list(self.config.members), "f": self.f}

    def on_state_reply(self, body: dict, sender: int) -> None:
        t = self._transfer
        if t is None or t["installing"] or body.get("nonce") != t["nonce"] or sender not in t["providers"]:
            return
        t["replies"][sender] = body
        groups: dict[str, list[int]] = {}
        for s, rep in t["replies"].items():
            rec = rep.get("record")
            if isinstance(rec, dict):
                groups.setdefault(request_digest(rec), []).append(s)
        for d, senders in groups.items():
            rec = t["replies"][senders[0]]["record"]
            try:
                f = int(rec["f"])
                members = [int(m) for m in rec["members"]]
            except (KeyError, TypeError, ValueError):
                continue
            if len(t["replies"]) < f + 1:
                continue
            # 2f+1 matching records, or one carrying a checkable checkpoint proof.
            proven = any(self._valid_proof(int(rec["seq"]), d, t["replies"][s].get("proof", [])) for s in senders)
            if len(senders) < 2 * f + 1 and not (proven and int(rec["seq"]) > 0):
                continue
            # Pick the highest view vouched for by at least f+1 providers.
            views = sorted((int(t["replies"][s].get("view", 0)) for s in t["replies"]), reverse=True)
            view = views[f] if len(views) > f else views[-1]
            entries = self._agreed_entries(t["replies"], int(rec["seq"]), f)
            proof = [bytes.fromhex(p) for p in t["replies"][senders[0]].get("proof", [])]
            t["installing"] = True
            self._event("state-attested", seq=rec["seq"], providers=sorted(senders))
            self.app.install_state(
                rec["app"],
                sorted(senders),
                lambda ok, rec=rec, members=members, f=f, view=view, entries=entries, proof=proof: self._state_installed(
                    ok, rec, members, f, view, entries, proof
                ),
            )
            return

    @staticmethod
    def _agreed_entries(replies: dict, base: int, f: int) -> list[dict]:
        out = []
        n = base + 1
        while True:
            votes: dict[str, list] = {}
            for rep in replies.values():
                for e in rep.get("entries", []):
                    if e.get("seq") == n:
                        reqs = e.get("reqs") or []
                        votes.setdefault(batch_digest([request_digest(r) for r in reqs]), []).append(reqs)
            agreed = next((v for v in votes.values() if len(v) >= f + 1), None)
            if agreed is None:
                return out
            out.append({"seq": n, "reqs": agreed[0]})
            n += 1

    def _state_installed(self, ok, record, members, f, view, entries, proof) -> None:
        nonce = self._transfer["nonce"] if self._transfer else None
        self._transfer = None
        self._cancel(self._transfer_timer)
        self._transfer_timer = None
        resume_vc, self._resume_vc = self._resume_vc, None
        if not ok:
            self._event("state-install-failed")
            self.status = "normal"
            self._rejoin_view_change(resume_vc)
            self._transfer_timer = self._timer(2 * self.vc_timeout, self._retry_after_failure)
            return
        seq = int(record["seq"])
        self.config = ViewConfig(self.view, tuple(members), f)
        before = self.view
        self.vc_target = self.view
        self.status = "normal"
        if seq > self.last_exec:
            self.last_exec = seq
        self.stable_seq = max(self.stable_seq, seq)
        self.stable_record = record
        self.stable_proof = proof
        for n in [n for n in self.log if n <= seq]:
            del self.log[n]
        for e in entries:
            n = e["seq"]
            if n <= self.last_exec:
                continue
            reqs = e["reqs"]
            digests = [request_digest(r) for r in reqs]
            for d, r in zip(digests, reqs):
                self.requests[d] = r
            s = self._slot(n)
            s.digest, s.reqs = batch_digest(digests), digests
            self._execute_batch(n, reqs, s.digest)
            s.executed = True
        # Providers' current view already reflects any reconfiguration replayed above.
        self.config = self.config.with_view(view if self.view != before else max(view, before))
        self.vc_target = self.view
        self._cancel(self._vc_timer)
        self._vc_timer = None
        for v in [v for v in self.vcs if v <= self.view]:
            del self.vcs[v]
        self._rejoin_view_change(resume_vc)
        self.next_seq = max(self.next_seq, self.last_exec + 1)
        for d in [d for d in self.pending if (self.requests.get(d, {}).get("client"), self.requests.get(d, {}).get("id")) in self.reply_cache]:
            self.pending.pop(d, None)
        self._event("state-installed", seq=seq, lastExecuted=self.last_exec, nonce=nonce)
        self._persist()
        self._replay_future()
        self.try_execute()

    def _rejoin_view_change(self, target) -> None:
        # Having asked for a view we must not go back to an older one: state
        # transfer may bring execution forward, but we stay in view change.
        if target is not None and target > self.view:
            self.status = "view-change"
            self.vc_target = target
            self._cancel(self._vc_timer)
            self._vc_timer = self._timer(self.vc_timeout * (2**self.vc_attempts), self._vc_timeout, target)

    def _retry_after_failure(self) -> None:
        self._transfer_timer = None
        self.request_state()

    def resume(self) -> None:
        """Continue after a pause during which no timer fired."""
        self._req_timer = self._vc_timer = self._stall_timer = self._transfer_timer = self._catchup_timer = None
        if self.status == "transfer":
            self._transfer = None
            self.status = "normal"
        if self.status == "view-change":
            self._vc_timer = self._timer(self.vc_timeout * (2**self.vc_attempts), self._vc_timeout, self.vc_target)
        self._arm_request_timer()
        self._arm_stall_timer()

    def stop(self) -> None:
        self.status = "stopped"
        for h in (self._req_timer, self._vc_timer, self._stall_timer, self._transfer_timer, self._catchup_timer):
            self._cancel(h)
