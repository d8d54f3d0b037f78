"""Authenticated wire envelopes.

Binary layout::

    u8 channel | u16 sender | u8 nmacs | nmacs * (u16 receiver | 16B mac) | body

``body`` is canonical JSON.  Each MAC is ``HMAC(key(sender, receiver),
sha256(channel | sender | body))`` truncated to 16 bytes: an authenticator
vector, so a message embedded in another one (view-change certificates) can
still be checked by every receiver that had an entry.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import struct
from dataclasses import dataclass

from ..encoding import canonical
from .config import KeyRing

CH_ORDER = 1  # replica <-> replica
CH_CLIENT = 2  # replica <-> ordering client
CH_PEER = 3  # block exchange
CH_GATEWAY = 4  # node-to-node gateway traffic (join requests)

MAC_LEN = 16
_HDR = struct.Struct(">BHB")
_MAC = struct.Struct(">H")

KINDS = (
    "Request",
    "PrePrepare",
    "Prepare",
    "Commit",
    "Reply",
    "Checkpoint",
    "ViewChange",
    "NewView",
    "Reconfig",
    "StateRequest",
    "StateReply",
)


class BadMessage(ValueError):
    pass


@dataclass
class Envelope:
    channel: int
    sender: int
    macs: dict
    body_bytes: bytes
    raw: bytes
    _body: dict | None = None

    @property
    def body(self) -> dict:
        if self._body is None:
            self._body = json.loads(self.body_bytes)
        return self._body

    def verify(self, me: int, keys: KeyRing) -> bool:
        tag = self.macs.get(me)
        if tag is None:
            return False
        want = _mac(keys.key(self.sender, me), _auth_digest(self.channel, self.sender, self.body_bytes))
        return hmac.compare_digest(tag, want)


def _auth_digest(channel: int, sender: int, body: bytes) -> bytes:
    return hashlib.sha256(_HDR.pack(channel, sender, 0)[:3] + body).digest()


def _mac(key: bytes, d: bytes) -> bytes:
    return hmac.new(key, d, hashlib.sha256).digest()[:MAC_LEN]


def seal(channel: int, sender: int, body: dict, recipients, keys: KeyRing) -> bytes:
    body_bytes = canonical(body)
    return seal_bytes(channel, sender, body_bytes, recipients, keys)


def seal_bytes(channel: int, sender: int, body_bytes: bytes, recipients, keys: KeyRing) -> bytes:
    recipients = sorted(set(recipients))
    d = _auth_digest(channel, sender, body_bytes)
    parts = [_HDR.pack(channel, sender, len(recipients))]
    for r in recipients:
        parts.append(_MAC.pack(r))
        parts.append(_mac(keys.key(sender, r), d))
    parts.append(body_bytes)
    return b"".join(parts)


def open_envelope(raw: bytes) -> Envelope:
    try:
        channel, sender, n = _HDR.unpack_from(raw, 0)
        pos = _HDR.size
        macs = {}
        for _ in range(n):
            (r,) = _MAC.unpack_from(raw, pos)
            macs[r] = raw[pos + 2 : pos + 2 + MAC_LEN]
            pos += 2 + MAC_LEN
        if pos > len(raw):
            raise BadMessage("truncated")
        return Envelope(channel, sender, macs, raw[pos:], raw)
    except struct.error as exc:
        raise BadMessage(str(exc)) from exc


def request_digest(req: dict) -> str:
    return hashlib.sha256(canonical(req)).hexdigest()


def batch_digest(req_digests: list[str]) -> str:
    return hashlib.sha256("".join(req_digests).encode("ascii")).hexdigest()


NULL_DIGEST = batch_digest([])


@dataclass(frozen=True)
class ConsensusMessage:
    """Decoded protocol message, as handled by a replica."""

    kind: str
    viewNumber: int
    sequenceNumber: int
    requestDigest: str
    sender: int
    payload: dict | None = None

    def to_body(self) -> dict:
        body = {"kind": self.kind, "view": self.viewNumber, "seq": self.sequenceNumber, "digest": self.requestDigest}
        if self.payload:
            body.update(self.payload)
        return body

    @classmethod
    def from_envelope(cls, env: Envelope) -> "ConsensusMessage":
        b = env.body
        extra = {k: v for k, v in b.items() if k not in ("kind", "view", "seq", "digest")}
        return cls(b.get("kind"), int(b.get("view", 0)), int(b.get("seq", 0)), b.get("digest", ""), env.sender, extra or None)
