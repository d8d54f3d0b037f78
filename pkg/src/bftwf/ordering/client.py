from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..encoding import canonical
from .messages import CH_CLIENT, seal

CONSENSUS_TIMEOUT = 5000.0
RETRANSMIT = 1000.0


@dataclass
class ConsensusReply:
    ok: bool
    result: dict | None = None
    error: str | None = None
    replies: int = 0
    latency: float = 0.0


@dataclass
class _Pending:
    req: dict
    callback: object
    started: float
    votes: dict = field(default_factory=dict)  # sender -> canonical result bytes
    timer: object = None
    deadline: object = None


def tally(votes: dict, quorum: int):
    """Return the result bytes backed by ``quorum`` identical replies, if any."""
    counts: dict[bytes, int] = {}
    for r in votes.values():
        counts[r] = counts.get(r, 0) + 1
    for r, c in counts.items():
        if c >= quorum:
            return r
    return None


class OrderingClient:
    """Submits requests to every replica and waits for 2f+1 identical replies.

    ``config`` is a callable returning the current :class:`ViewConfig` (the
    co-located replica's view of membership).
    """

    def __init__(self, node_id: int, config, keys, transport, *, timeout: float = CONSENSUS_TIMEOUT,
                 retransmit: float = RETRANSMIT, id_prefix: str | None = None):
        self.id = node_id
        self.config = config
        self.keys = keys
        self.transport = transport
        self.timeout = timeout
        self.retransmit = retransmit
        self.pending: dict[str, _Pending] = {}
        self._counter = 0
        # Distinct per incarnation so a restarted node never reuses request ids.
        self.id_prefix = id_prefix if id_prefix is not None else str(node_id)

    def next_id(self) -> str:
        self._counter += 1
        return f"{self.id_prefix}-{self._counter}"

    def submit(self, op: dict, mode: str = "ordered", callback=None, request_id: str | None = None) -> str:
        rid = request_id or self.next_id()
        req = {"kind": "Request", "client": self.id, "id": rid, "mode": mode, "op": op}
        p = _Pending(req, callback, self.transport.now())
        self.pending[rid] = p
        self._send(p)
        p.deadline = self.transport.call_later(self.timeout, self._expire, rid)
        return rid

    def _send(self, p: _Pending) -> None:
        members = self.config().members
        raw = seal(CH_CLIENT, self.id, p.req, members, self.keys)
        for m in members:
            self.transport.send(m, raw)
        p.timer = self.transport.call_later(self.retransmit, self._retransmit, p.req["id"])

    def resume(self) -> None:
        """Re-arm timers for requests still in flight after a pause."""
        for rid, p in list(self.pending.items()):
            remaining = max(0.0, self.timeout - (self.transport.now() - p.started))
            p.deadline = self.transport.call_later(remaining, self._expire, rid)
            self._send(p)

    def _retransmit(self, rid: str) -> None:
        p = self.pending.get(rid)
        if p is not None:
            self._send(p)

    def _expire(self, rid: str) -> None:
        p = self.pending.pop(rid, None)
        if p is None:
            return
        if p.timer is not None:
            p.timer.cancel()
        self._finish(p, ConsensusReply(False, None, "consensus-timeout", len(p.votes), self.transport.now() - p.started))

    def on_reply(self, body: dict, sender: int) -> None:
        p = self.pending.get(body.get("id"))
        if p is None or sender not in self.config().members:
            return
        p.votes[sender] = canonical(body.get("result"))
        winner = tally(p.votes, self.config().quorum)
        if winner is None:
            return
        del self.pending[body["id"]]
        for h in (p.timer, p.deadline):
            if h is not None:
                h.cancel()
        self._finish(p, ConsensusReply(True, json.loads(winner), None, len(p.votes), self.transport.now() - p.started))

    @staticmethod
    def _finish(p: _Pending, reply: ConsensusReply) -> None:
        if p.callback is not None:
            p.callback(reply)
