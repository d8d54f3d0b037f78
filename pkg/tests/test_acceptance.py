"""Acceptance criteria, one test each.

Every test carries an ``acceptance`` marker; conftest prints one PASS/FAIL
line per criterion at the end of the run, with the measured figures.
"""

import asyncio
import random
import tempfile
import time
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bftwf.bench import run_loopback
from bftwf.blockstore import ChainStore, verify_chain
from bftwf.engine import WorkflowOperation
from bftwf.ordering.config import prepare_quorum, reply_quorum
from bftwf.sim import SimCluster, load_scenario, report_bytes, run_scenario
from oracles import chain_hash, chain_records, min_quorum_overlap
from workflows import seq_spec

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
acceptance = pytest.mark.acceptance


def launch(c, node, **data):
    r = c.call(node, {"call": "launchCase", "specId": "seq3", "caseData": data})
    assert r["ok"], r
    return r["entity"]["caseId"]


@acceptance(1, "safety: equal heads and digests with one crashed node")
def test_chain_equality_with_crashed_node(record_property):
    t0 = time.perf_counter()
    sc = load_scenario(SCENARIOS / "crash-follower.json")
    rep = run_scenario(sc)
    elapsed = time.perf_counter() - t0
    ops = [s for s in rep["steps"] if s.get("kind") in ("call", "read")]
    live = [v for v in rep["nodes"].values() if v["alive"]]
    assert len(ops) >= 20 and all(s["ok"] for s in ops)
    assert len(live) == 3 and not rep["nodes"]["3"]["alive"]
    assert len({v["headHash"] for v in live}) == 1
    assert len({v["stateDigest"] for v in live}) == 1
    assert live[0]["height"] == len(ops) - 1  # every write is a block, the read is not
    assert elapsed < 10
    record_property("detail", f"{len(ops)} ops, height {live[0]['height']}, {elapsed:.2f}s")


@acceptance(2, "liveness across a leader crash, prepared digests preserved")
def test_leader_failure(record_property):
    t0 = time.perf_counter()
    rep = run_scenario(load_scenario(SCENARIOS / "leader-crash.json"))
    assert rep["liveness"]["ok"] and all(s["ok"] for s in rep["steps"])
    live = [v for v in rep["nodes"].values() if v["alive"]]
    assert all(v["view"] >= 1 for v in live) and rep["agreement"]["heads"] and rep["agreement"]["digests"]
    # Whatever the crashed leader executed is executed identically by the survivors.
    for seq, digest in rep["nodes"]["0"]["executed"]:
        for v in live:
            assert [seq, digest] in v["executed"]

    # Crash the leader at the moment a slot is prepared but not yet executed.
    c = SimCluster(4, 1, seed=8)
    assert c.call(1, {"call": "loadSpecification", "spec": seq_spec(nodes=(1, 2, 3))})["ok"]
    done = []
    for k in range(6):
        c.nodes[1 + k % 3].gateway.handle({"call": "launchCase", "specId": "seq3", "caseData": {"k": str(k)}},
                                          done.append)

    def prepared_only():
        return {(s.seq, s.digest) for i in (1, 2, 3) for s in c.nodes[i].replica.log.values()
                if s.prepared and not s.executed}

    while not prepared_only():
        assert c.net.step()
    certs = prepared_only()
    c.crash(0)
    assert c.net.run_until(lambda: len(done) == 6, 20_000)
    assert all(r["ok"] for r in done), done
    assert c.settle()
    for nd in c.live():
        assert nd.replica.view >= 1
        executed = dict(nd.replica.executed_log)
        for seq, digest in certs:
            assert executed[seq] == digest
    assert len({nd.engine.digest() for nd in c.live()}) == 1
    assert len(c.live()[0].engine.cases) == 6
    elapsed = time.perf_counter() - t0
    assert elapsed < 10
    record_property("detail", f"{len(certs)} prepared slot(s) carried into view {c.live()[0].replica.view}, {elapsed:.2f}s")


@acceptance(3, "illegal operation is ordered, stored and rejected by every engine")
def test_byzantine_rejection(record_property):
    c = SimCluster(4, 1, seed=9)
    assert c.call(0, {"call": "loadSpecification", "spec": seq_spec()})["ok"]
    case = launch(c, 0)
    assert c.settle()
    item = f"{case}.A.1"  # owned by node 0
    before = {nd.id: (nd.engine.digest(), nd.engine.items[item].state) for nd in c.live()}
    op = WorkflowOperation("StartWorkItem", {"workItemId": item}, 2, c.nodes[2].client.next_id())
    reply = c.submit_raw(2, op)
    assert reply.ok
    assert c.settle()
    height = reply.result["height"]
    for nd in c.live():
        blk = nd.chain.get(height)
        assert WorkflowOperation.from_bytes(blk.payload) == op and blk.originNode == 2
        local = nd.local_results[height][1]
        assert not local.ok and local.error == "visibility-violation"
        assert (nd.engine.digest(), nd.engine.items[item].state) == before[nd.id]
        assert verify_chain(nd.chain).ok
    record_property("detail", f"on-chain at height {height} on all 4 nodes, state unchanged")


@acceptance(4, "quorum intersection for f in 1..5")
@given(st.integers(1, 5))
def test_quorum_arithmetic(f):
    n = 3 * f + 1
    for q in (reply_quorum(f), prepare_quorum(f) + 1):  # prepared = pre-prepare + 2f prepares
        assert q == 2 * f + 1
        worst = min_quorum_overlap(n, q)
        assert worst >= f + 1  # so at least one member of the overlap is honest
        assert worst == 2 * q - n


@acceptance(5, "recovery: corrupted engine detected, rebuilt to the majority digest")
def test_recovery_equivalence(record_property):
    t0 = time.perf_counter()
    c = SimCluster(4, 1, seed=10, faultPolicy="FailEarly")
    assert c.call(0, {"call": "loadSpecification", "spec": seq_spec()})["ok"]
    for k in range(12):
        launch(c, k % 4)
    assert c.settle()
    c.corrupt_engine(2)
    assert c.nodes[2].engine.digest() != c.nodes[0].engine.digest()
    r = c.read(2, {"query": "list-cases"}, "UnorderedConsensus")
    assert r["divergence"] is True
    assert c.settle(20_000)
    majority = {c.nodes[i].engine.digest() for i in (0, 1, 3)}
    assert len(majority) == 1
    assert c.nodes[2].stats["recoveries"] == 1
    assert c.nodes[2].engine.digest() in majority
    assert c.nodes[2].chain.head_hash == c.nodes[0].chain.head_hash
    assert launch(c, 2)
    elapsed = time.perf_counter() - t0
    assert elapsed < 15
    record_property("detail", f"{elapsed:.2f}s")


@acceptance(6, "startup catch-up from a 200-block cluster; restart fetches only the suffix")
def test_startup_catch_up(tmp_path, record_property):
    c = SimCluster(4, 1, seed=12, spares=1, data_root=tmp_path)
    assert c.call(0, {"call": "loadSpecification", "spec": seq_spec()})["ok"]
    for k in range(99):
        launch(c, k % 4)
    assert c.settle()
    c.stop_node(3)
    for k in range(100):
        launch(c, k % 3)
    assert c.settle()
    assert c.nodes[0].chain.head_seq == 200

    box = []
    joiner = c.start_node(4, box.append)
    c.net.run_until(lambda: bool(box), 30_000)
    assert box == [True]
    assert c.settle(20_000)
    ref = c.nodes[0]
    assert joiner.chain.head_hash == ref.chain.head_hash and joiner.engine.digest() == ref.engine.digest()
    assert joiner.stats["fetchedFrom"] == 1 and joiner.stats["blocksFetched"] > 0

    box = []
    back = c.start_node(3, box.append)
    assert back.chain.head_seq == 100  # its own prefix survived on disk
    c.net.run_until(lambda: bool(box), 30_000)
    assert box == [True]
    assert c.settle(20_000)
    assert back.stats["fetchedFrom"] == 101
    assert back.chain.head_hash == ref.chain.head_hash and back.engine.digest() == ref.engine.digest()
    record_property(
        "detail",
        f"joiner fetched {joiner.stats['blocksFetched']} blocks; restart fetched "
        f"{back.stats['fetchedFrom']}..{back.stats['fetchedTo']} only",
    )


@acceptance(7, "tamper evidence: every single-byte mutation caught at its block")
def test_tamper_evidence(tmp_path, record_property):
    path = tmp_path / "chain.log"
    store = ChainStore(path)
    for k in range(1, 51):
        store.append_ordered(f'{{"opType":"LaunchCase","n":{k}}}'.encode(), k % 4)
    store.close()
    clean = path.read_bytes()
    records = chain_records(clean)
    assert len(records) == 50
    mutations = 0
    for k, (off, length) in enumerate(records, start=1):
        for pos in range(off, off + length):
            raw = bytearray(clean)
            raw[pos] ^= 0xA5
            path.write_bytes(bytes(raw))
            report = verify_chain(ChainStore(path))
            assert (report.ok, report.broken_at) == (False, k), (k, pos)
            mutations += 1
    path.write_bytes(clean)
    intact = ChainStore(path)
    prev = b"\0" * 32
    for k in range(1, 51):
        blk = intact.get(k)
        assert blk.hash == chain_hash(k, prev, blk.payload, blk.originNode)
        prev = blk.hash
    record_property("detail", f"{mutations} mutations over 50 blocks")


@acceptance(8, "read consistency: ordered reads see acknowledged writes; consensus reads mask a bad node")
def test_read_consistency(record_property):
    for trial in range(100):
        rng = random.Random(trial)
        c = SimCluster(4, 1, seed=trial, latency=(rng.uniform(0.5, 2), rng.uniform(3, 30)))
        assert c.call(rng.randrange(4), {"call": "loadSpecification", "spec": seq_spec()})["ok"]
        noise = []
        for _ in range(rng.randrange(6)):
            c.nodes[rng.randrange(4)].gateway.handle({"call": "launchCase", "specId": "seq3"}, noise.append)
        c.run(rng.uniform(0, 20))
        writer, reader = rng.randrange(4), rng.randrange(4)
        case = launch(c, writer, trial=str(trial))
        r = c.read(reader, {"query": "case-data", "caseId": case}, "OrderedConsensus")
        assert r["ok"] and r["entity"] == {"trial": str(trial)}, (trial, r)

    c = SimCluster(4, 1, seed=200)
    assert c.call(0, {"call": "loadSpecification", "spec": seq_spec()})["ok"]
    launch(c, 1)
    assert c.settle()
    honest = c.read(0, {"query": "list-cases"}, "LocalBypass")["entity"]
    c.corrupt_engine(3)
    assert c.read(3, {"query": "list-cases"}, "LocalBypass")["entity"] != honest
    assert c.read(3, {"query": "list-cases"}, "UnorderedConsensus")["entity"] == honest
    record_property("detail", "100/100 interleavings")


@acceptance(9, "determinism: same scenario and seed give bit-equal reports")
def test_determinism(record_property):
    names = sorted(p.name for p in SCENARIOS.glob("*.json"))
    for name in names:
        sc = load_scenario(SCENARIOS / name)
        for seed in (None, 12345):
            assert report_bytes(run_scenario(sc, seed)) == report_bytes(run_scenario(sc, seed)), name
    record_property("detail", f"{len(names)} scenarios x 2 seeds")


@acceptance(10, "real-socket loopback: median write latency < 1 s, >= 500 ops/s")
def test_latency_and_throughput(record_property):
    with tempfile.TemporaryDirectory() as d:
        light = asyncio.run(run_loopback(ops=300, concurrency=4, data_root=d + "/light"))
        heavy = asyncio.run(run_loopback(ops=3000, concurrency=256, data_root=d + "/heavy"))
    assert light.ok == light.ops and heavy.ok == heavy.ops
    assert light.median_ms < 1000 and heavy.median_ms < 1000
    assert heavy.throughput >= 500
    record_property(
        "detail",
        f"median {light.median_ms:.1f} ms at 4 in flight, {heavy.median_ms:.0f} ms at 256; "
        f"{heavy.throughput:.0f} ops/s",
    )


@acceptance(11, "timers: cancel unstarted, skip started, cleared by completion; all ordered and replicated")
def test_timer_semantics(record_property):
    def timed(spec_id, trigger):
        return seq_spec(spec_id, nodes=(1, 2, 3), timers={"A": {"trigger": trigger, "durationMs": 200}})

    c = SimCluster(4, 1, seed=13)
    for spec in (timed("enable", "onEnablement"), timed("start", "onStart"), timed("done", "onStart")):
        assert c.call(0, {"call": "loadSpecification", "spec": spec})["ok"]
    cases = {}
    for spec_id in ("enable", "start", "done"):
        r = c.call(0, {"call": "launchCase", "specId": spec_id})
        cases[spec_id] = r["entity"]["caseId"]
    assert c.settle()
    item = {k: f"{v}.A.1" for k, v in cases.items()}
    assert c.call(1, {"call": "startWorkItem", "workItemId": item["start"]})["ok"]
    assert c.call(1, {"call": "startWorkItem", "workItemId": item["done"]})["ok"]
    assert c.call(1, {"call": "completeWorkItem", "workItemId": item["done"]})["ok"]
    c.run(1000)
    assert c.settle()
    for nd in c.live():
        states = {k: nd.engine.items[v].state for k, v in item.items()}
        assert states == {"enable": "Cancelled", "start": "Skipped", "done": "Completed"}
        ops = [WorkflowOperation.from_bytes(nd.chain.get(k).payload) for k in range(1, nd.chain.head_seq + 1)]
        expiries = [(o.payload["workItemId"], o.payload["action"]) for o in ops if o.opType == "TimerExpiry"]
        assert sorted(expiries) == sorted([(item["enable"], "cancel"), (item["start"], "skip")])
        assert all(o.originNode == 1 for o in ops if o.opType == "TimerExpiry")
    assert len({nd.chain.head_hash for nd in c.live()}) == 1
    assert len({nd.engine.digest() for nd in c.live()}) == 1
    record_property("detail", "2 TimerExpiry blocks on all 4 nodes, completed item untouched")
