"""Real-socket transport: length-prefixed frames over TCP on an asyncio loop.

Every node listens on one port.  The first frame on a connection says who is
talking: ``{"hello": "peer", "id": k}`` for another node (every later frame
is a sealed envelope handed to the node as-is) or ``{"hello": "client"}``
for an outside caller (every later frame is a JSON request answered on the
same connection).
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import time

from .encoding import canonical, frame, unframe

log = logging.getLogger(__name__)

RECONNECT_MS = 200.0
MAX_QUEUED = 10_000


class _Framed(asyncio.Protocol):
    """Reassembles frames from a byte stream and hands them to ``on_frame``."""

    def __init__(self, on_frame, on_lost=None):
        self.on_frame = on_frame
        self.on_lost = on_lost
        self.buf = b""
        self.transport = None

    def connection_made(self, transport) -> None:
        self.transport = transport

    def data_received(self, data: bytes) -> None:
        frames, self.buf = unframe(self.buf + data)
        for f in frames:
            try:
                self.on_frame(self, f)
            except Exception:  # one bad frame must not kill the connection
                log.exception("frame handler failed")

    def connection_lost(self, exc) -> None:
        if self.on_lost is not None:
            self.on_lost(self)

    def write(self, payload: bytes) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.write(frame(payload))


class _Peer:
    def __init__(self):
        self.proto: _Framed | None = None
        self.queue: list[bytes] = []
        self.connecting = False
        self.failed_at = -1e18


class NetTransport:
    """Node-facing transport with the same surface as the simulator's."""

    def __init__(self, node_id: int, addresses: dict, loop: asyncio.AbstractEventLoop | None = None):
        self.node_id = node_id
        self.addresses = dict(addresses)  # id -> (host, port)
        self.loop = loop or asyncio.get_event_loop()
        self.handler = None
        self.client_handler = None
        self.peers: dict[int, _Peer] = {}
        self.server = None
        self._inbound: set[_Framed] = set()

    # -- transport surface --------------------------------------------------

    def now(self) -> float:
        return time.time() * 1000.0

    def call_later(self, delay: float, fn, *args):
        return self.loop.call_later(max(0.0, delay) / 1000.0, fn, *args)

    def set_handler(self, fn) -> None:
        self.handler = fn

    def send(self, dest: int, data: bytes) -> None:
        if dest == self.node_id:
            self.loop.call_soon(self._dispatch, data)
            return
        if dest not in self.addresses:
            return
        peer = self.peers.setdefault(dest, _Peer())
        if peer.proto is not None and peer.proto.transport is not None and not peer.proto.transport.is_closing():
            peer.proto.write(data)
            return
        if len(peer.queue) < MAX_QUEUED:
            peer.queue.append(data)
        if not peer.connecting and (self.loop.time() * 1000.0 - peer.failed_at) >= RECONNECT_MS:
            peer.connecting = True
            self.loop.create_task(self._connect(dest, peer))

    def _dispatch(self, data: bytes) -> None:
        if self.handler is not None:
            self.handler(data)

    # -- outbound -----------------------------------------------------------

    async def _connect(self, dest: int, peer: _Peer) -> None:
        host, port = self.addresses[dest]

        def lost(proto):
            if peer.proto is proto:
                peer.proto = None

        try:
            _, proto = await self.loop.create_connection(lambda: _Framed(lambda p, f: None, lost), host, port)
        except OSError:
            # Protocol retransmissions cover whatever was queued meanwhile.
            peer.failed_at = self.loop.time() * 1000.0
            peer.queue.clear()
            return
        finally:
            peer.connecting = False
        proto.write(canonical({"hello": "peer", "id": self.node_id}))
        peer.proto = proto
        queued, peer.queue = peer.queue, []
        for data in queued:
            proto.write(data)

    # -- inbound ------------------------------------------------------------

    async def listen(self, host: str, port: int) -> int:
        self.server = await self.loop.create_server(lambda: _Framed(self._first_frame, self._inbound.discard), host, port)
        return self.server.sockets[0].getsockname()[1]

    def _first_frame(self, proto: _Framed, data: bytes) -> None:
        self._inbound.add(proto)
        try:
            hello = json.loads(data)
        except ValueError:
            proto.transport.close()
            return
        if hello.get("hello") == "peer":
            proto.on_frame = lambda p, f: self._dispatch(f)
        elif hello.get("hello") == "client" and self.client_handler is not None:
            proto.on_frame = self._client_frame
        else:
            proto.transport.close()

    def _client_frame(self, proto: _Framed, data: bytes) -> None:
        try:
            msg = json.loads(data)
        except ValueError:
            proto.write(canonical({"rid": None, "out": {"ok": False, "error": "bad-request"}}))
            return
        rid = msg.get("rid") if isinstance(msg, dict) else None

        def reply(out: dict) -> None:
            proto.write(canonical({"rid": rid, "out": out}))

        if not isinstance(msg, dict):
            reply({"ok": False, "error": "bad-request"})
            return
        self.client_handler(msg, reply)

    def close(self) -> None:
        if self.server is not None:
            self.server.close()
        for peer in self.peers.values():
            if peer.proto is not None and peer.proto.transport is not None:
                peer.proto.transport.close()
        for proto in list(self._inbound):
            if proto.transport is not None:
                proto.transport.close()


class NetClient:
    """Outside caller speaking the client side of the node protocol."""

    def __init__(self):
        self.proto: _Framed | None = None
        self.waiting: dict[int, asyncio.Future] = {}
        self._rids = itertools.count(1)

    async def connect(self, host: str, port: int) -> "NetClient":
        loop = asyncio.get_running_loop()
        _, self.proto = await loop.create_connection(lambda: _Framed(self._on_frame, self._on_lost), host, port)
        self.proto.write(canonical({"hello": "client"}))
        return self

    def _on_frame(self, proto, data: bytes) -> None:
        msg = json.loads(data)
        fut = self.waiting.pop(msg.get("rid"), None)
        if fut is not None and not fut.done():
            fut.set_result(msg.get("out"))

    def _on_lost(self, proto) -> None:
        for fut in self.waiting.values():
            if not fut.done():
                fut.set_exception(ConnectionError("connection to node lost"))
        self.waiting.clear()

    async def request(self, msg: dict, timeout: float | None = None) -> dict:
        rid = next(self._rids)
        fut = asyncio.get_running_loop().create_future()
        self.waiting[rid] = fut
        self.proto.write(canonical(dict(msg, rid=rid)))
        return await asyncio.wait_for(fut, timeout)

    async def call(self, call: dict, timeout: float | None = None) -> dict:
        return await self.request({"call": call}, timeout)

    async def read(self, query: dict, mode: str, timeout: float | None = None) -> dict:
        return await self.request({"read": query, "mode": mode}, timeout)

    def close(self) -> None:
        if self.proto is not None and self.proto.transport is not None:
            self.proto.transport.close()


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)
