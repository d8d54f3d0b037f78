"""Deterministic discrete-event network for running whole clusters in-process.

A single seeded RNG draws link latencies, drop decisions and the tiebreak
for events scheduled at the same instant, so a scenario replayed with the
same seed produces the same event trace bit for bit.  Node code sees only
the transport interface (``send``, ``now``, ``call_later``, ``set_handler``)
and cannot tell it apart from real sockets.
"""

from __future__ import annotations

import copy
import hashlib
import heapq
import json
import random
import re
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .blockstore import Block
from .encoding import canonical
from .engine import Case
from .ordering import KeyRing
from .ordering.messages import BadMessage, open_envelope, seal

FAULT_KINDS = (
    "crash",
    "delayLinks",
    "dropLinks",
    "equivocateLeader",
    "corruptEngineState",
    "corruptBlock",
    "corruptSnapshot",
)
BYZANTINE_KINDS = frozenset({"equivocateLeader", "corruptEngineState", "corruptBlock", "corruptSnapshot"})

SIM_SECRET = "sim-cluster-secret"
SIM_OPERATOR = "sim-operator-key"


class ScenarioInvalid(ValueError):
    pass


class _Handle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class FaultProfile:
    target: int
    kind: str
    start: float = 0.0
    end: float | None = None
    factor: float = 10.0
    probability: float = 1.0
    seq: int = 1

    def active(self, now: float) -> bool:
        return self.start <= now and (self.end is None or now < self.end)

    @classmethod
    def from_dict(cls, d: dict) -> "FaultProfile":
        kind = d.get("kind")
        if kind not in FAULT_KINDS:
            raise ScenarioInvalid(f"unknown fault kind {kind!r}")
        window = d.get("window") or [d.get("at", 0.0), None]
        return cls(
            target=int(d["target"]),
            kind=kind,
            start=float(window[0] if window[0] is not None else 0.0),
            end=None if window[1] is None else float(window[1]),
            factor=float(d.get("factor", 10.0)),
            probability=float(d.get("probability", 1.0)),
            seq=int(d.get("seq", 1)),
        )


@dataclass
class SimConfig:
    seed: int = 0
    latency: tuple[float, float] = (1.0, 5.0)
    faults: list[FaultProfile] = field(default_factory=list)
    max_time: float = 60_000.0
    settle: float = 2_000.0


class SimNetwork:
    def __init__(self, seed: int = 0, latency: tuple[float, float] = (1.0, 5.0), keys: KeyRing | None = None):
        self.rng = random.Random(seed)
        self.latency = latency
        self.time = 0.0
        self.keys = keys
        self._queue: list = []
        self._counter = 0
        self.handlers: dict[int, object] = {}
        self.down: set[int] = set()
        self.faults: list[FaultProfile] = []
        self.events = 0
        self.messages = 0
        self._trace = hashlib.sha256()

    # -- primitives ----------------------------------------------------------

    def endpoint(self, node_id: int) -> "SimTransport":
        return SimTransport(self, node_id)

    def schedule(self, delay: float, fn, *args, owner: int | None = None) -> _Handle:
        h = _Handle()
        self._counter += 1
        at = self.time + max(0.0, float(delay))
        heapq.heappush(self._queue, (at, self.rng.random(), self._counter, h, owner, fn, args))
        return h

    def send(self, src: int, dst: int, data: bytes) -> None:
        if src in self.down:
            return
        factor = 1.0
        for fp in self.faults:
            if not fp.active(self.time) or fp.target not in (src, dst):
                continue
            if fp.kind == "dropLinks" and self.rng.random() < fp.probability:
                return
            if fp.kind == "delayLinks":
                factor *= fp.factor
            if fp.target == src and fp.kind in ("equivocateLeader", "corruptSnapshot"):
                data = self._tamper(fp.kind, src, dst, data)
                if data is None:
                    return
        lo, hi = self.latency
        self.schedule(self.rng.uniform(lo, hi) * factor, self._deliver, src, dst, data)

    def _deliver(self, src: int, dst: int, data: bytes) -> None:
        # Messages already on the wire still arrive after their sender crashes.
        if dst in self.down:
            return
        handler = self.handlers.get(dst)
        if handler is None:
            return
        self.messages += 1
        self._trace.update(f"{self.time!r}|{src}|{dst}|".encode())
        self._trace.update(hashlib.sha256(data).digest())
        handler(data)

    def _tamper(self, kind: str, src: int, dst: int, data: bytes) -> bytes | None:
        """Rewrite a byzantine node's outgoing message (it holds its own keys)."""
        if self.keys is None:
            return data
        try:
            env = open_envelope(data)
            body = dict(env.body)
        except (BadMessage, ValueError):
            return data
        if kind == "equivocateLeader" and body.get("kind") == "PrePrepare" and dst % 2 == 1:
            # Odd-numbered replicas get a different batch for the same slot.
            from .ordering.messages import NULL_DIGEST

            body["reqs"], body["digest"] = [], NULL_DIGEST
        elif kind == "corruptSnapshot" and body.get("kind") == "StateReply":
            rec = copy.deepcopy(body.get("record") or {})
            if isinstance(rec.get("app"), dict):
                rec["app"]["stateDigest"] = "00" * 32
            body["record"] = rec
            body["entries"] = []
        else:
            return data
        return seal(env.channel, env.sender, body, list(env.macs), self.keys)

    # -- running -------------------------------------------------------------

    def step(self) -> bool:
        while self._queue:
            at, _tb, _n, h, owner, fn, args = heapq.heappop(self._queue)
            if h.cancelled:
                continue
            self.time = max(self.time, at)
            if owner is not None and owner in self.down:
                continue
            self.events += 1
            fn(*args)
            return True
        return False

    def pending(self) -> int:
        return sum(1 for e in self._queue if not e[3].cancelled)

    def run(self, until: float | None = None, stop=None, max_events: int | None = None) -> None:
        n = 0
        while self._queue:
            if stop is not None and stop():
                return
            nxt = self._next_time()
            if nxt is None:
                return
            if until is not None and nxt > until:
                self.time = until
                return
            self.step()
            n += 1
            if max_events is not None and n >= max_events:
                return
        if until is not None:
            self.time = max(self.time, until)

    def _next_time(self):
        while self._queue and self._queue[0][3].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def run_until(self, pred, timeout: float) -> bool:
        deadline = self.time + timeout
        self.run(until=deadline, stop=pred)
        return bool(pred())

    @property
    def trace_digest(self) -> str:
        return self._trace.copy().hexdigest()


class SimTransport:
    """Per-node view of the simulated network."""

    def __init__(self, net: SimNetwork, node_id: int):
        self.net = net
        self.node_id = node_id

    def send(self, dest: int, data: bytes) -> None:
        if dest == self.node_id:
            self.net.schedule(0.0, self.net._deliver, self.node_id, dest, data)
        else:
            self.net.send(self.node_id, dest, data)

    def now(self) -> float:
        return self.net.time

    def call_later(self, delay: float, fn, *args):
        return self.net.schedule(delay, fn, *args, owner=self.node_id)

    def set_handler(self, fn) -> None:
        self.net.handlers[self.node_id] = fn


# -- cluster ------------------------------------------------------------------


class SimCluster:
    """A set of nodes on one simulated network."""

    def __init__(self, n: int = 4, f: int = 1, *, seed: int = 0, latency=(1.0, 5.0), spares: int = 0,
                 data_root: str | Path | None = None, **node_opts):
        from .node import MemberAddress, Node, NodeConfig

        self._Node, self._NodeConfig = Node, NodeConfig
        self.n, self.f = n, f
        self.keys = KeyRing(SIM_SECRET.encode(), SIM_OPERATOR.encode())
        self.net = SimNetwork(seed, tuple(latency), self.keys)
        self.data_root = Path(data_root) if data_root is not None else None
        self.node_opts = node_opts
        self.addresses = [MemberAddress(i) for i in range(n + spares)]
        self.nodes: dict = {}
        for i in range(n):
            self.nodes[i] = self._make_node(i)
            self.nodes[i].ready = True

    def _config(self, i: int):
        opts = dict(self.node_opts)
        data_dir = str(self.data_root / f"node-{i}") if self.data_root is not None else None
        return self._NodeConfig(
            nodeId=i,
            members=list(self.addresses),
            f=self.f,
            clusterSecret=SIM_SECRET,
            operatorKey=SIM_OPERATOR,
            operatorToken="sim-token",
            dataDir=data_dir,
            initialView=list(range(self.n)),
            **opts,
        )

    def _make_node(self, i: int):
        return self._Node(self._config(i), self.net.endpoint(i))

    @property
    def time(self) -> float:
        return self.net.time

    def live(self) -> list:
        return [nd for i, nd in sorted(self.nodes.items()) if i not in self.net.down and nd.alive]

    # -- faults --------------------------------------------------------------

    def add_fault(self, fp: FaultProfile) -> None:
        self.net.faults.append(fp)
        if fp.kind == "crash":
            self.net.schedule(fp.start - self.net.time, self.crash, fp.target)
            if fp.end is not None:
                self.net.schedule(fp.end - self.net.time, self.resume, fp.target)
        elif fp.kind == "corruptEngineState":
            self.net.schedule(fp.start - self.net.time, self.corrupt_engine, fp.target)
        elif fp.kind == "corruptBlock":
            self.net.schedule(fp.start - self.net.time, self.corrupt_block, fp.target, fp.seq)

    def crash(self, i: int) -> None:
        self.net.down.add(i)
        if i in self.nodes:
            self.nodes[i].alive = False

    def resume(self, i: int) -> None:
        self.net.down.discard(i)
        nd = self.nodes.get(i)
        if nd is not None:
            nd.resume()

    def corrupt_engine(self, i: int) -> None:
        eng = self.nodes[i].engine
        if eng.cases:
            first = sorted(eng.cases, key=lambda c: (len(c), c))[0]
            eng.cases[first].caseData["corrupted"] = "yes"
        else:
            eng.cases["corrupt"] = Case(id="corrupt", specId="corrupt", version=1)

    def corrupt_block(self, i: int, seq: int) -> None:
        chain = self.nodes[i].chain
        blk = chain.get(seq)
        if blk is None:
            return
        payload = bytearray(blk.payload)
        payload[0] ^= 0xFF
        chain.blocks[seq] = Block(blk.sequenceNumber, blk.prevHash, bytes(payload), blk.originNode, blk.hash)

    # -- node lifecycle ------------------------------------------------------

    def stop_node(self, i: int) -> None:
        nd = self.nodes[i]
        nd.close()
        self.crash(i)

    def start_node(self, i: int, callback=None):
        """(Re)create node ``i`` from its data directory and run startup."""
        old = self.nodes.get(i)
        if old is not None and old.alive:
            old.close()
        self.net.down.discard(i)
        nd = self._make_node(i)
        self.nodes[i] = nd
        nd.startup(callback)
        return nd

    # -- calls ---------------------------------------------------------------

    def call(self, node: int, call: dict, timeout: float = 30_000.0) -> dict:
        """Run a gateway call to completion in simulated time."""
        box = []
        self.nodes[node].gateway.handle(call, box.append)
        self.net.run_until(lambda: bool(box), timeout)
        return box[0] if box else {"ok": False, "error": "no-result"}

    def read(self, node: int, query: dict, mode: str, timeout: float = 30_000.0) -> dict:
        box = []
        self.nodes[node].gateway.handle_read(query, mode, box.append)
        self.net.run_until(lambda: bool(box), timeout)
        return box[0] if box else {"ok": False, "error": "no-result"}

    def submit_raw(self, node: int, op, timeout: float = 30_000.0):
        """Order an operation without the submitting gateway's checks."""
        box = []
        self.nodes[node].client.submit({"type": "write", "op": op.to_dict()}, "ordered", box.append,
                                       request_id=op.clientRequestId)
        self.net.run_until(lambda: bool(box), timeout)
        return box[0] if box else None

    def run(self, ms: float) -> None:
        self.net.run(until=self.net.time + ms)

    def settle(self, timeout: float = 10_000.0) -> bool:
        return self.net.run_until(self.converged, timeout)

    def converged(self) -> bool:
        live = self.live()
        if not live:
            return True
        heads = {nd.chain.head_hash for nd in live}
        digests = {nd.engine.digest() for nd in live}
        busy = any(nd.replica.status != "normal" or nd.replica.pending for nd in live)
        return len(heads) == 1 and len(digests) == 1 and not busy

    def find_item(self, case_id: str, task_id: str, states=("Enabled", "Started", "Suspended")) -> dict | None:
        for nd in self.live():
            for it in nd.engine.items.values():
                if it.caseId == case_id and it.taskId == task_id and it.state in states:
                    return it.describe()
        return None


# -- scenarios ----------------------------------------------------------------

_REF = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _substitute(obj, bindings: dict):
    if isinstance(obj, str):
        full = _REF.fullmatch(obj)
        if full and full.group(1) in bindings:
            return bindings[full.group(1)]
        return _REF.sub(lambda m: str(bindings.get(m.group(1), m.group(0))), obj)
    if isinstance(obj, list):
        return [_substitute(v, bindings) for v in obj]
    if isinstance(obj, dict):
        return {k: _substitute(v, bindings) for k, v in obj.items()}
    return obj


def _binding_of(entity):
    if isinstance(entity, dict):
        for k in ("caseId", "id", "specId", "scheduled"):
            if k in entity:
                return entity[k]
    return entity


def validate_scenario(sc: dict) -> None:
    cl = sc.get("cluster") or {}
    n, f = int(cl.get("n", 4)), int(cl.get("f", 1))
    if n < 3 * f + 1:
        raise ScenarioInvalid(f"n={n} cannot tolerate f={f}")
    faults = [FaultProfile.from_dict(d) for d in sc.get("faults", [])]
    byz = {fp.target for fp in faults if fp.kind in BYZANTINE_KINDS}
    if cl.get("claimTolerance", True) and len(byz) > f:
        raise ScenarioInvalid(f"{len(byz)} byzantine targets exceed f={f}")
    if not isinstance(sc.get("steps", []), list):
        raise ScenarioInvalid("steps must be a list")


class ScenarioRunner:
    def __init__(self, scenario: dict, seed: int | None = None, data_root: str | Path | None = None):
        validate_scenario(scenario)
        self.sc = scenario
        cl = scenario.get("cluster") or {}
        self.seed = int(seed if seed is not None else scenario.get("seed", 0))
        lat = scenario.get("latency") or {}
        opts = {k: cl[k] for k in ("readMode", "faultPolicy", "checkpointInterval", "viewChangeMs", "consensusMs",
                                   "retransmitMs", "snapshotEvery") if k in cl}
        self._tmp = None
        if data_root is None and cl.get("persist"):
            self._tmp = tempfile.TemporaryDirectory(prefix="bftwf-sim-")
            data_root = self._tmp.name
        self.cluster = SimCluster(
            int(cl.get("n", 4)), int(cl.get("f", 1)), seed=self.seed,
            latency=(float(lat.get("min", 1.0)), float(lat.get("max", 5.0))),
            spares=int(cl.get("spares", 0)), data_root=data_root, **opts,
        )
        for d in scenario.get("faults", []):
            self.cluster.add_fault(FaultProfile.from_dict(d))
        stop = scenario.get("stop") or {}
        self.max_time = float(stop.get("maxTime", 60_000.0))
        self.settle = float(stop.get("settle", 2_000.0))
        self.bindings: dict = {}
        self.results: list[dict] = []

    def run(self) -> dict:
        net = self.cluster.net
        steps = self.sc.get("steps", [])
        for idx, step in enumerate(steps):
            at = step.get("at")
            if at is not None and float(at) > net.time:
                net.run(until=float(at))
            if net.time >= self.max_time:
                self.results.append({"index": idx, "ok": False, "error": "not-started"})
                continue
            self.results.append(self._run_step(idx, step))
        net.run(until=min(self.max_time, net.time + self.settle))
        report = self.report()
        if self._tmp is not None:
            for nd in self.cluster.nodes.values():
                nd.chain.close()
            self._tmp.cleanup()
        return report

    def _wait(self, box: list, timeout: float) -> None:
        net = self.cluster.net
        limit = min(self.max_time, net.time + timeout)
        net.run(until=limit, stop=lambda: bool(box))

    def _run_step(self, idx: int, step: dict) -> dict:
        c = self.cluster
        net = c.net
        step = _substitute(step, self.bindings)
        start = net.time
        out = {"index": idx}
        if "wait" in step:
            net.run(until=min(self.max_time, net.time + float(step["wait"])))
            out.update(kind="wait", ok=True)
            return out
        if "settle" in step:
            ok = net.run_until(c.converged, float(step["settle"]))
            out.update(kind="settle", ok=ok)
            return out
        if "recover" in step:
            node = int(step["recover"])
            box = []
            c.nodes[node].recover(box.append)
            self._wait(box, float(step.get("timeout", 30_000.0)))
            out.update(kind="recover", node=node, ok=bool(box and box[0]))
        elif "join" in step or "restart" in step:
            node = int(step.get("join", step.get("restart")))
            box = []
            c.start_node(node, box.append)
            self._wait(box, float(step.get("timeout", 30_000.0)))
            out.update(kind="join" if "join" in step else "restart", node=node, ok=bool(box and box[0]))
        elif "stopNode" in step:
            c.stop_node(int(step["stopNode"]))
            out.update(kind="stop", node=int(step["stopNode"]), ok=True)
            return out
        elif "read" in step:
            node = int(step.get("node", self._first_live()))
            if node in c.net.down:
                out.update(kind="read", node=node, ok=False, error="node-down")
                return out
            box = []
            c.nodes[node].gateway.handle_read(step["read"], step.get("mode", c.nodes[node].gateway.read_mode), box.append)
            self._wait(box, float(step.get("timeout", 30_000.0)))
            res = box[0] if box else {"ok": False, "error": "incomplete"}
            out.update(kind="read", node=node, ok=res.get("ok", False), error=res.get("error"), entity=res.get("entity"))
        elif "call" in step:
            call = dict(step["call"])
            if "workItem" in step:
                wi = step["workItem"]
                item = self._resolve_item(str(wi["case"]), str(wi["task"]), float(step.get("resolveTimeout", 3_000.0)))
                if item is None:
                    out.update(kind="call", ok=False, error="item-not-found", call=call.get("call"))
                    return out
                call["workItemId"] = item["id"]
                step.setdefault("node", item["assignedNode"])
            node = int(step.get("node", self._first_live()))
            if node in c.net.down:
                out.update(kind="call", call=call.get("call"), node=node, ok=False, error="node-down")
                return out
            box = []
            if step.get("bypassGateway"):
                gw = c.nodes[node].gateway
                op = gw.build_operation(call)
                gw.submit_operation(op, box.append)
            else:
                c.nodes[node].gateway.handle(call, box.append)
            self._wait(box, float(step.get("timeout", 30_000.0)))
            res = box[0] if box else {"ok": False, "error": "node-down" if node in c.net.down else "incomplete"}
            out.update(kind="call", call=call.get("call"), node=node, ok=res.get("ok", False), error=res.get("error"),
                       entity=res.get("entity"), height=res.get("height"))
            if "as" in step and res.get("ok"):
                self.bindings[step["as"]] = _binding_of(res.get("entity"))
        else:
            raise ScenarioInvalid(f"step {idx} has no action")
        out["latency"] = round(net.time - start, 6)
        return out

    def _first_live(self) -> int:
        live = self.cluster.live()
        return live[0].id if live else 0

    def _resolve_item(self, case_id: str, task_id: str, timeout: float):
        box = []

        def look():
            it = self.cluster.find_item(case_id, task_id)
            if it is not None:
                box.append(it)
            return bool(box)

        if look():
            return box[0]
        self.cluster.net.run_until(look, timeout)
        return box[0] if box else None

    def report(self) -> dict:
        c = self.cluster
        nodes = {}
        for i, nd in sorted(c.nodes.items()):
            nodes[str(i)] = {
                "alive": i not in c.net.down and nd.alive,
                "height": nd.chain.head_seq,
                "headHash": nd.chain.head_hash.hex(),
                "stateDigest": nd.engine.digest().hex(),
                "view": nd.replica.view,
                "members": list(nd.replica.config.members),
                "viewChanges": nd.replica.view_changes,
                "executed": [[s, d] for s, d in nd.replica.executed_log],
                "divergences": nd.divergences,
                "recoveries": nd.stats["recoveries"],
                "blocksFetched": nd.stats["blocksFetched"],
                "fetchedFrom": nd.stats["fetchedFrom"],
            }
        live = [v for v in nodes.values() if v["alive"]]
        incomplete = [r["index"] for r in self.results if r.get("error") in ("consensus-timeout", "incomplete", "not-started")]
        lat = [r["latency"] for r in self.results if r.get("kind") in ("call", "read") and "latency" in r]
        return {
            "seed": self.seed,
            "simTime": round(c.net.time, 6),
            "events": c.net.events,
            "messages": c.net.messages,
            "traceDigest": c.net.trace_digest,
            "nodes": nodes,
            "steps": self.results,
            "agreement": {
                "heads": len({v["headHash"] for v in live}) <= 1,
                "digests": len({v["stateDigest"] for v in live}) <= 1,
                "liveNodes": len(live),
            },
            "liveness": {"ok": not incomplete, "incomplete": incomplete},
            "latency": {
                "median": statistics.median(lat) if lat else None,
                "max": max(lat) if lat else None,
            },
        }


def run_scenario(scenario: dict, seed: int | None = None, data_root=None) -> dict:
    """Run a declarative scenario and return its report (a JSON-ready dict)."""
    return ScenarioRunner(scenario, seed, data_root).run()


def load_scenario(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def report_bytes(report: dict) -> bytes:
    return canonical(report)
