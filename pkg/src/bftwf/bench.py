"""Loopback cluster on real sockets, for latency and throughput measurement."""

from __future__ import annotations

import asyncio
import socket
import statistics
import tempfile
import time
from dataclasses import dataclass, field

from .node import MemberAddress, NodeConfig
from .runtime import NodeHost
from .net import NetClient

BENCH_SPEC = {
    "specId": "bench",
    "version": 1,
    "tasks": [{"taskId": "T", "assignedNode": 0}],
    "edges": [],
    "start": ["T"],
    "end": ["T"],
}


def free_ports(k: int) -> list[int]:
    socks = []
    try:
        for _ in range(k):
            s = socket.socket()
            s.bind(("127.0.0.1", 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def loopback_configs(n: int = 4, f: int = 1, data_root: str | None = None, monitor: bool = False,
                     **opts) -> list[NodeConfig]:
    ports = free_ports(2 * n)
    members = [MemberAddress(i, "127.0.0.1", ports[i], ports[n + i] if monitor else 0) for i in range(n)]
    return [
        NodeConfig(
            nodeId=i,
            members=members,
            f=f,
            clusterSecret="loopback-secret",
            operatorKey="loopback-operator",
            operatorToken="loopback-token",
            dataDir=f"{data_root}/node{i}" if data_root else None,
            **opts,
        )
        for i in range(n)
    ]


@dataclass
class BenchResult:
    ops: int
    ok: int
    seconds: float
    latencies_ms: list[float] = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return self.ok / self.seconds if self.seconds else 0.0

    @property
    def median_ms(self) -> float:
        return statistics.median(self.latencies_ms) if self.latencies_ms else float("inf")

    def to_dict(self) -> dict:
        return {"ops": self.ops, "ok": self.ok, "seconds": round(self.seconds, 3),
                "throughput": round(self.throughput, 1), "medianMs": round(self.median_ms, 2),
                "maxMs": round(max(self.latencies_ms, default=0.0), 2)}


async def run_loopback(ops: int = 3000, concurrency: int = 256, n: int = 4, f: int = 1,
                       data_root: str | None = None) -> BenchResult:
    """Start ``n`` nodes on loopback, load one spec, then drive ``ops`` launchCase writes.

    Load is spread over one client connection per node; ``concurrency`` writes
    are kept in flight.  Latency is measured per write from send to gateway answer.
    """
    loop = asyncio.get_running_loop()
    hosts = [NodeHost(c, loop) for c in loopback_configs(n, f, data_root)]
    for h in hosts:
        await h.start(catch_up=False)
    clients = [await NetClient().connect("127.0.0.1", h.port) for h in hosts]
    try:
        first = await clients[0].call({"call": "loadSpecification", "spec": BENCH_SPEC}, timeout=30)
        if not first.get("ok"):
            raise RuntimeError(f"spec load failed: {first}")
        latencies: list[float] = []
        ok = 0
        issued = 0

        async def worker(k: int) -> None:
            nonlocal ok, issued
            c = clients[k % len(clients)]
            while issued < ops:
                issued += 1
                t0 = time.perf_counter()
                out = await c.call({"call": "launchCase", "specId": "bench"}, timeout=60)
                latencies.append((time.perf_counter() - t0) * 1000.0)
                ok += bool(out.get("ok"))

        t0 = time.perf_counter()
        await asyncio.gather(*(worker(k) for k in range(concurrency)))
        return BenchResult(ops, ok, time.perf_counter() - t0, latencies)
    finally:
        for c in clients:
            c.close()
        for h in hosts:
            h.close()


def bench(ops: int = 3000, concurrency: int = 256, n: int = 4, f: int = 1) -> BenchResult:
    with tempfile.TemporaryDirectory() as d:
        return asyncio.run(run_loopback(ops, concurrency, n, f, d))
