"""Run a node on real sockets: transport, client endpoint and monitor together."""

from __future__ import annotations

import asyncio
import logging

from .monitor import MonitorServer
from .net import NetTransport
from .node import Node, NodeConfig

log = logging.getLogger(__name__)


class NodeHost:
    """One node process.  ``monitor_port`` overrides the configured port (``0`` picks a free one)."""

    def __init__(self, config: NodeConfig, loop: asyncio.AbstractEventLoop | None = None,
                 monitor_port: int | None = None):
        self.config = config
        self.loop = loop or asyncio.get_event_loop()
        addresses = {m.id: (m.host, m.port) for m in config.members}
        self.transport = NetTransport(config.nodeId, addresses, self.loop)
        self.node = Node(config, self.transport)
        self.transport.client_handler = self.on_client
        me = config.address(config.nodeId)
        # A configured monitorPort of 0 means no monitor.
        self.monitor_port = (me.monitorPort or None) if monitor_port is None else monitor_port
        self.monitor: MonitorServer | None = None
        self.port = None

    async def start(self, catch_up: bool = True) -> None:
        me = self.config.address(self.config.nodeId)
        self.port = await self.transport.listen(me.host, me.port)
        if self.monitor_port is not None:
            self.monitor = MonitorServer(self.node, self.loop, me.host, self.monitor_port, self.config.operatorToken)
            self.monitor_port = self.monitor.start()
        if catch_up:
            self.node.startup()
        else:
            self.node.ready = True
        log.info("node %s listening on %s:%s (monitor %s)", self.config.nodeId, me.host, self.port,
                 self.monitor_port if self.monitor else "off")

    def on_client(self, msg: dict, reply) -> None:
        gw = self.node.gateway
        if "call" in msg and isinstance(msg["call"], dict):
            gw.handle(msg["call"], reply)
        elif "read" in msg and isinstance(msg["read"], dict):
            gw.handle_read(msg["read"], msg.get("mode") or gw.read_mode, reply)
        else:
            reply({"ok": False, "error": "bad-request"})

    def close(self) -> None:
        if self.monitor is not None:
            self.monitor.close()
        self.transport.close()
        self.node.close()


async def serve(config: NodeConfig, stop: asyncio.Event | None = None) -> None:
    host = NodeHost(config, asyncio.get_running_loop())
    await host.start()
    stop = stop or asyncio.Event()
    try:
        await stop.wait()
    finally:
        host.close()
